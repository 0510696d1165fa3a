"""scikit-learn style wrappers around the trainable networks."""
import numpy as np
from sklearn.base import BaseEstimator

from .errors import UnfitModel
from .model import EgoCogNav, InputStats, ModelConfig, MTransformer, load_network
from .training import LossWeights, OptimizerState, split_train_val, train
from .validation import check_windows


class _NetworkForecaster(BaseEstimator):
    network_cls = None

    def __init__(self, d_model=64, n_heads=4, n_fusion_layers=2, n_decoder_layers=2,
                 modalities=("video", "motion", "head", "gaze"), epochs=50, batch_size=16,
                 lr_max=1e-3, weight_decay=1e-4, warmup_epochs=2.0, clip_norm=1.0,
                 lambda_traj=1.0, lambda_head=1.0, lambda_u=1.0, lambda_var=0.3, alpha=0.3,
                 gamma=0.98, val_fraction=0.1, dtype="float32", seed=0):
        self.d_model = d_model
        self.n_heads = n_heads
        self.n_fusion_layers = n_fusion_layers
        self.n_decoder_layers = n_decoder_layers
        self.modalities = modalities
        self.epochs = epochs
        self.batch_size = batch_size
        self.lr_max = lr_max
        self.weight_decay = weight_decay
        self.warmup_epochs = warmup_epochs
        self.clip_norm = clip_norm
        self.lambda_traj = lambda_traj
        self.lambda_head = lambda_head
        self.lambda_u = lambda_u
        self.lambda_var = lambda_var
        self.alpha = alpha
        self.gamma = gamma
        self.val_fraction = val_fraction
        self.dtype = dtype
        self.seed = seed

    def model_config(self, batch):
        _, _, g, _, c = batch.features.shape
        return ModelConfig(d_model=self.d_model, n_heads=self.n_heads, n_fusion_layers=self.n_fusion_layers,
                           n_decoder_layers=self.n_decoder_layers, t_past=batch.motion.shape[1],
                           t_future=batch.future_motion.shape[1], grid=g, channels=c,
                           modalities=tuple(self.modalities), dtype=self.dtype)

    def loss_weights(self):
        return LossWeights(self.lambda_traj, self.lambda_head, self.lambda_u, self.lambda_var, self.alpha, self.gamma)

    def optimizer(self):
        return OptimizerState(lr_max=self.lr_max, weight_decay=self.weight_decay, batch_size=self.batch_size,
                              epochs=self.epochs, warmup_epochs=self.warmup_epochs, clip_norm=self.clip_norm)

    def fit(self, X, y=None, log_path=None, checkpoint_dir=None):
        batch = check_windows(X)
        train_b, val_b = split_train_val(batch, self.val_fraction, self.seed)
        net = self.network_cls(self.model_config(batch), seed=self.seed)
        net.stats = InputStats.fit(train_b)
        result = train(net, train_b, val_b, self.loss_weights(), self.optimizer(), seed=self.seed,
                       log_path=log_path, checkpoint_dir=checkpoint_dir)
        if result.best_state is not None:
            net.load_state_dict(result.best_state)
        self.network_ = net
        self.history_ = result.history
        self.best_epoch_ = result.best_epoch
        return self

    def _net(self):
        if not hasattr(self, "network_"):
            raise UnfitModel(f"{type(self).__name__} must be fit before predict")
        return self.network_

    def predict(self, X, chunk=256):
        """ForecastBundle with a leading batch axis."""
        net = self._net()
        batch = check_windows(X)
        parts = [net.forward(batch.subset(np.arange(s, min(s + chunk, len(batch)))))
                 for s in range(0, len(batch), chunk)]
        fields = {k: np.concatenate([getattr(p, k) for p in parts]) for k in ("traj", "head")}
        for k in ("u_hat", "env_logits", "behavior_logits"):
            fields[k] = None if getattr(parts[0], k) is None else np.concatenate([getattr(p, k) for p in parts])
        return type(parts[0])(**fields)

    def save(self, path):
        self._net().save(path, seed=self.seed, extra={"estimator": self.get_params()})

    @classmethod
    def load(cls, path):
        net, manifest = load_network(path)
        params = dict(manifest.get("extra", {}).get("estimator", {}))
        if "modalities" in params:
            params["modalities"] = tuple(params["modalities"])
        est = cls(**params)
        est.network_ = net
        return est


class EgoCogNavForecaster(_NetworkForecaster):
    network_cls = EgoCogNav

    def predict_uncertainty(self, X):
        return self.predict(X).u_hat


class MTransformerForecaster(_NetworkForecaster):
    network_cls = MTransformer
