"""Synthetic wayfinding episodes on a corridor/junction graph.

A walker follows a route of waypoint nodes. At every node it holds a
route-choice distribution over the incident edges; ground-truth
uncertainty is the entropy of that distribution normalized by
``log(K_max)`` (``K_max`` = largest node degree in the world). Far from a
junction the walker is committed to one edge, so uncertainty ramps up on
approach and decays after departure.

Behaviours are scripted from the uncertainty level: head scanning above
``theta_scan`` while approaching, a pause above ``theta_hes``, and with
probability ``wrong_gain * U`` a wrong branch followed by a turnaround and
return (look-back). Visual features are a fixed linear embedding of local
scene descriptors into a G x G x C grid plus per-episode noise.
"""
import math
from dataclasses import asdict, dataclass, field, fields

import numpy as np

from ..errors import BadConfig
from ..geometry import matrix_to_rot6d, rot_y, rot_z, wrap_angle, world_to_body_deltas
from .data import BEHAVIOR_LABELS, ENV_LABELS, STEP_SECONDS, Episode

FEATURE_BASIS_SEED = 20240611
N_DESCRIPTORS = 10


@dataclass
class Node:
    id: str
    x: float
    y: float
    occluded: bool = False
    crowd: bool = False
    signage: bool = False
    vertical: bool = False
    transition: bool = False
    distractor: float = 1.0
    preferences: dict = None


@dataclass
class WorldConfig:
    nodes: list
    edges: list
    route: list
    speed: float = 1.2
    crowd_speed: float = 0.8
    gait_amplitude: float = 0.15
    gait_frequency: float = 1.8
    speed_noise: float = 0.05
    approach_radius: float = 4.0
    depart_radius: float = 1.5
    theta_scan: float = 0.4
    theta_hes: float = 0.6
    hes_steps: int = 5
    wrong_gain: float = 0.6
    wrong_distance: float = 3.0
    max_turn_rate: float = 0.35
    lb_steps: int = 5
    confirm_radius: float = 3.0
    confirm_steps: int = 8
    scan_amplitude: float = 0.6
    scan_period: float = 1.6
    head_jitter: float = 0.01
    head_bob: float = 0.04
    max_head_rate: float = 0.6
    signage_boost: float = 3.0
    occlusion_mix: float = 0.5
    goal_lookahead: int = 1
    grid: int = 4
    channels: int = 32
    feature_noise: float = 0.3
    name: str = "world"

    @classmethod
    def from_dict(cls, data):
        data = dict(data)
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise BadConfig(f"unknown world config keys: {sorted(unknown)}")
        try:
            nodes = [n if isinstance(n, Node) else Node(**n) for n in data.pop("nodes")]
            edges = [tuple(e) for e in data.pop("edges")]
            route = list(data.pop("route"))
        except (KeyError, TypeError) as exc:
            raise BadConfig(f"world config needs nodes, edges and route: {exc}") from None
        world = cls(nodes=nodes, edges=edges, route=route, **data)
        world.validate()
        return world

    def to_dict(self):
        return asdict(self)

    def validate(self):
        ids = [n.id for n in self.nodes]
        if len(set(ids)) != len(ids):
            raise BadConfig("duplicate node ids")
        idset = set(ids)
        adj = {i: set() for i in ids}
        for edge in self.edges:
            if len(edge) != 2 or edge[0] not in idset or edge[1] not in idset or edge[0] == edge[1]:
                raise BadConfig(f"bad edge {edge!r}")
            adj[edge[0]].add(edge[1])
            adj[edge[1]].add(edge[0])
        if len(self.route) < 2:
            raise BadConfig("route needs at least two nodes")
        for a, b in zip(self.route, self.route[1:]):
            if a not in idset or b not in idset or b not in adj[a]:
                raise BadConfig(f"route hop {a}->{b} is not an edge")
        for n in self.nodes:
            if n.distractor < 0 or (n.preferences and any(w < 0 for w in n.preferences.values())):
                raise BadConfig(f"node {n.id}: negative preference weight")
        positive = ("speed", "crowd_speed", "approach_radius", "depart_radius", "max_turn_rate",
                    "scan_period", "gait_frequency", "max_head_rate")
        for name in positive:
            if getattr(self, name) <= 0:
                raise BadConfig(f"{name} must be positive")
        if not (0 <= self.theta_scan <= 1 and 0 <= self.theta_hes <= 1):
            raise BadConfig("thresholds must lie in [0, 1]")
        if self.grid < 1 or self.channels < 1:
            raise BadConfig("grid and channels must be positive")
        if self.goal_lookahead < 0 or self.hes_steps < 0 or self.lb_steps < 0:
            raise BadConfig("step counts must be non-negative")


class _Graph:
    def __init__(self, world):
        self.nodes = {n.id: n for n in world.nodes}
        self.adj = {n.id: [] for n in world.nodes}
        for a, b in world.edges:
            if b not in self.adj[a]:
                self.adj[a].append(b)
            if a not in self.adj[b]:
                self.adj[b].append(a)
        self.k_max = max(len(v) for v in self.adj.values())
        self.world = world

    def xy(self, node_id):
        n = self.nodes[node_id]
        return np.array([n.x, n.y], dtype=float)

    def degree(self, node_id):
        return len(self.adj[node_id])

    def is_junction(self, node_id):
        return self.degree(node_id) >= 3

    def choice(self, node_id, arrival, route_next):
        """Options (neighbour ids) and route-choice probabilities at a node."""
        node = self.nodes[node_id]
        options = list(self.adj[node_id])
        if node.preferences:
            w = np.array([float(node.preferences.get(o, 0.0)) for o in options])
        else:
            w = np.array([0.0 if o == arrival else (1.0 if o == route_next else node.distractor)
                          for o in options])
            if node.signage and route_next in options:
                w[options.index(route_next)] *= self.world.signage_boost
        if w.sum() <= 0:
            w = np.array([1.0 if o == route_next else 0.0 for o in options])
        p = w / w.sum()
        if node.occluded and not node.preferences:
            allowed = np.array([o != arrival for o in options], dtype=float)
            p = (1 - self.world.occlusion_mix) * p + self.world.occlusion_mix * allowed / allowed.sum()
        return options, p

    def normalized_entropy(self, p):
        if self.k_max < 2:
            return 0.0
        p = p[p > 0]
        h = float(-(p * np.log(p)).sum())
        return min(max(h / math.log(self.k_max), 0.0), 1.0)


@dataclass
class _Step:
    pos: np.ndarray
    target_heading: float
    u: float
    env: set = field(default_factory=set)
    behavior: set = field(default_factory=set)
    desc: np.ndarray = None
    goal: np.ndarray = None
    head_offset: float = None
    scan: bool = False
    glance: float = 0.0


class _Simulator:
    def __init__(self, world, rng):
        self.w = world
        self.g = _Graph(world)
        self.rng = rng
        self.steps = []
        self.t = 0
        self.ou_speed = 0.0
        self.phase = rng.uniform(0, 2 * math.pi)
        self.hesitated = set()
        self.confirmed = set()
        self.confirm_left = 0

    # ---------------------------------------------------------- context
    def _mixture_u(self, node_idx, s, intended):
        info = self.node_info[node_idx]
        if info is None or s <= 0:
            return 0.0
        options, p = info["options"], info["p"]
        delta = np.array([1.0 if o == intended else 0.0 for o in options])
        return self.g.normalized_entropy((1 - s) * delta + s * p)

    def _descriptors(self, node_idx, s, off_route, crowd, pos):
        route = self.w.route
        d = np.zeros(N_DESCRIPTORS)
        d[9] = 1.0
        d[4] = float(crowd)
        d[6] = float(off_route)
        if node_idx is not None and s > 0:
            nid = route[node_idx]
            node = self.g.nodes[nid]
            k = self.g.degree(nid)
            d[0] = s
            d[1] = s * (k - 2) / max(self.g.k_max - 2, 1)
            d[2] = s * node.occluded
            d[3] = s * node.signage
            p = self.node_info[node_idx]["p"]
            d[7] = s * (1.0 - p.max())
        near = [n for n in self.g.nodes.values()
                if (n.vertical or n.transition) and np.hypot(n.x - pos[0], n.y - pos[1]) < 3.0]
        d[8] = float(bool(near))
        occluded_near = node_idx is not None and s > 0 and self.g.nodes[route[node_idx]].occluded
        d[5] = 0.0 if off_route or occluded_near else 1.0
        return d

    def _env(self, node_idx, s, off_route, crowd, pos):
        labels = set()
        route = self.w.route
        if node_idx is not None and (s > 0 or off_route):
            nid = route[node_idx]
            if self.g.is_junction(nid):
                labels.add("JCT")
            if self.g.nodes[nid].occluded:
                labels.add("OCC")
        if crowd:
            labels.add("CROWD")
        for n in self.g.nodes.values():
            dist = np.hypot(n.x - pos[0], n.y - pos[1])
            if n.vertical and dist < 3.0:
                labels.add("MULT")
            if n.transition and dist < 3.0:
                labels.add("ST")
        return labels

    def _goal(self, node_idx):
        last = len(self.w.route) - 1
        return self.g.xy(self.w.route[min(node_idx + self.w.goal_lookahead, last)])

    # ---------------------------------------------------------- emitting
    def _emit(self, pos, heading, u, node_idx, s, off_route, crowd, goal_idx, behavior=(),
              head_offset=None, scan=False, glance=0.0):
        step = _Step(pos=np.array(pos, dtype=float), target_heading=heading, u=u)
        step.env = self._env(node_idx, s, off_route, crowd, pos)
        step.behavior = set(behavior)
        step.desc = self._descriptors(node_idx, s, off_route, crowd, pos)
        step.goal = self._goal(goal_idx)
        step.head_offset = head_offset
        step.scan = scan
        step.glance = glance
        self.steps.append(step)
        self.t += 1

    def _speed(self, crowd):
        w = self.w
        base = w.crowd_speed if crowd else w.speed
        self.ou_speed += -0.2 * self.ou_speed + w.speed_noise * self.rng.normal() if w.speed_noise else 0.0
        gait = 1.0 + w.gait_amplitude * math.sin(2 * math.pi * w.gait_frequency * self.t * STEP_SECONDS
                                                 + self.phase)
        return max(base * gait + self.ou_speed, 0.05)

    def _walk(self, a_xy, b_xy, kind, approach_idx=None, depart_idx=None, doubt_idx=None,
              crowd=False, goal_idx=0):
        """Walk a straight segment, landing exactly on its end point."""
        w = self.w
        pos = np.array(a_xy, dtype=float)
        seg = np.asarray(b_xy, dtype=float) - pos
        length = float(np.linalg.norm(seg))
        if length < 1e-9:
            return
        direction = seg / length
        heading = math.atan2(direction[1], direction[0])
        travelled = 0.0
        lb_left = w.lb_steps if kind == "back" else 0
        while travelled < length - 1e-12:
            travelled = min(travelled + self._speed(crowd) * STEP_SECONDS, length)
            pos = np.asarray(a_xy, dtype=float) + direction * travelled
            remaining = length - travelled
            behavior = set()
            scan = False
            glance = 0.0
            head_offset = None
            if kind in ("wrong", "back"):
                node_idx, s = doubt_idx, 1.0
                u = self.doubt_u(doubt_idx)
                behavior.add("WRONG" if kind == "wrong" else "BACK")
                if lb_left > 0:
                    behavior.add("LB")
                    head_offset = math.pi * 0.6 * lb_left / max(w.lb_steps, 1)
                    lb_left -= 1
                off_route = True
            else:
                off_route = False
                s_app = 0.0
                if approach_idx is not None and self.node_info[approach_idx] is not None:
                    s_app = max(0.0, 1.0 - remaining / w.approach_radius)
                s_dep = 0.0
                if depart_idx is not None and self.node_info[depart_idx] is not None:
                    s_dep = max(0.0, 1.0 - travelled / w.depart_radius)
                if s_app >= s_dep and s_app > 0:
                    node_idx, s = approach_idx, s_app
                    u = self._mixture_u(approach_idx, s_app, self.node_info[approach_idx]["intended"])
                elif s_dep > 0:
                    node_idx, s = depart_idx, s_dep
                    u = self._mixture_u(depart_idx, s_dep, self.w.route[depart_idx + 1])
                else:
                    node_idx, s, u = None, 0.0, 0.0
                approaching = node_idx is not None and node_idx == approach_idx
                if approaching and u > w.theta_scan:
                    behavior.add("SCAN")
                    scan = True
                if approach_idx is not None:
                    target = self.w.route[approach_idx]
                    tnode = self.g.nodes[target]
                    if tnode.signage and remaining <= w.confirm_radius and target not in self.confirmed:
                        self.confirmed.add(target)
                        self.confirm_left = w.confirm_steps
                if self.confirm_left > 0:
                    k = w.confirm_steps - self.confirm_left
                    glance = 0.5 * math.sin(math.pi * (k + 1) / (w.confirm_steps + 1))
                    behavior.add("CONFIRM")
                    self.confirm_left -= 1
            self._emit(pos, heading, u, node_idx, s, off_route, crowd, goal_idx, behavior,
                       head_offset, scan, glance)
            if (kind == "route" and approach_idx is not None and node_idx == approach_idx
                    and u > w.theta_hes and approach_idx not in self.hesitated):
                self.hesitated.add(approach_idx)
                for _ in range(w.hes_steps):
                    beh = {"HES"} | ({"SCAN"} if u > w.theta_scan else set())
                    self._emit(pos, heading, u, node_idx, s, False, crowd, goal_idx, beh,
                               None, u > w.theta_scan, 0.0)

    def doubt_u(self, idx):
        k = self.g.degree(self.w.route[idx])
        return min(math.log(k) / math.log(self.g.k_max), 1.0) if self.g.k_max > 1 else 0.0

    def _turnaround(self, pos, back_heading, idx, crowd, goal_idx):
        n = int(math.ceil(math.pi / self.w.max_turn_rate)) + 1
        u = self.doubt_u(idx)
        for _ in range(n):
            self._emit(pos, back_heading, u, idx, 1.0, True, crowd, goal_idx, {"BACK", "LB"},
                       head_offset="look_back")

    # ---------------------------------------------------------- plan
    def run(self):
        w, g, route = self.w, self.g, self.w.route
        last = len(route) - 1
        self.node_info = [None] * len(route)
        wrong = [None] * len(route)
        for i in range(1, last):
            nid = route[i]
            if not g.is_junction(nid):
                continue
            options, p = g.choice(nid, route[i - 1], route[i + 1])
            u_node = g.normalized_entropy(p)
            candidates = [j for j, o in enumerate(options)
                          if o not in (route[i - 1], route[i + 1]) and p[j] > 0]
            if candidates and self.rng.uniform() < min(w.wrong_gain * u_node, 1.0):
                weights = p[candidates] / p[candidates].sum()
                wrong[i] = options[candidates[int(self.rng.choice(len(candidates), p=weights))]]
            self.node_info[i] = {"options": options, "p": p,
                                 "intended": wrong[i] or route[i + 1]}

        start = g.xy(route[0])
        first = g.xy(route[1]) - start
        self.start_heading = math.atan2(first[1], first[0])
        self._emit(start, self.start_heading, 0.0, None, 0.0, False,
                   g.nodes[route[0]].crowd, 1)
        for i in range(1, last + 1):
            a, b = route[i - 1], route[i]
            crowd = g.nodes[a].crowd or g.nodes[b].crowd
            self._walk(g.xy(a), g.xy(b), "route", approach_idx=i if i < last else None,
                       depart_idx=i - 1 if i - 1 > 0 else None, crowd=crowd, goal_idx=i)
            if wrong[i] is not None:
                junction = g.xy(b)
                branch = g.xy(wrong[i]) - junction
                dist = min(w.wrong_distance, 0.7 * float(np.linalg.norm(branch)))
                end = junction + branch / np.linalg.norm(branch) * dist
                self._walk(junction, end, "wrong", doubt_idx=i, crowd=crowd, goal_idx=i)
                back = junction - end
                self._turnaround(end, math.atan2(back[1], back[0]), i, crowd, i)
                self._walk(end, junction, "back", doubt_idx=i, crowd=crowd, goal_idx=i)
        return self.steps


def _feature_basis(grid, channels):
    rng = np.random.default_rng(FEATURE_BASIS_SEED)
    return rng.normal(size=(N_DESCRIPTORS, grid, grid, channels)) / math.sqrt(N_DESCRIPTORS)


def synth_generate(config, seed, episode_id=None):
    """Simulate one episode on ``config`` (a WorldConfig or its dict form)."""
    world = config if isinstance(config, WorldConfig) else WorldConfig.from_dict(config)
    world.validate()
    rng = np.random.default_rng(seed)
    sim = _Simulator(world, rng)
    steps = sim.run()
    n = len(steps)

    pos = np.array([s.pos for s in steps])
    psi = np.empty(n)
    psi[0] = sim.start_heading
    for i in range(1, n):
        err = wrap_angle(steps[i].target_heading - psi[i - 1])
        psi[i] = psi[i - 1] + np.clip(err, -world.max_turn_rate, world.max_turn_rate)
    poses = np.column_stack([pos, psi])
    motion = np.vstack([np.zeros((1, 3)), world_to_body_deltas(poses)])

    # head yaw offset relative to the body: scripted behaviours plus jitter
    offset = np.zeros(n)
    jitter = jitter_prev = 0.0
    scan_clock = 0
    for i, s in enumerate(steps):
        jitter = 0.9 * jitter + world.head_jitter * rng.normal() if world.head_jitter else 0.0
        base = 0.0
        if s.scan:
            base = world.scan_amplitude * math.sin(2 * math.pi * scan_clock * STEP_SECONDS / world.scan_period)
            scan_clock += 1
        else:
            scan_clock = 0
        if s.head_offset == "look_back":
            base = float(wrap_angle(s.target_heading - psi[i]))
        elif s.head_offset is not None:
            base = s.head_offset
        target = base + s.glance
        prev = offset[i - 1] - jitter_prev if i else 0.0
        offset[i] = prev + float(np.clip(target - prev, -world.max_head_rate, world.max_head_rate)) + jitter
        jitter_prev = jitter
    pitch = world.head_bob * np.sin(2 * math.pi * world.gait_frequency * np.arange(n) * STEP_SECONDS
                                    + sim.phase)
    if world.head_jitter:
        pitch = pitch + 0.5 * world.head_jitter * rng.normal(size=n)
    head = matrix_to_rot6d(rot_z(psi + offset) @ rot_y(pitch), check=False)

    gaze_u = 0.5 + 0.35 * np.tanh(offset) + 0.03 * rng.normal(size=n)
    gaze_v = 0.55 - 0.5 * pitch + 0.03 * rng.normal(size=n)
    gaze = np.clip(np.column_stack([gaze_u, gaze_v]), 0.0, 1.0)

    desc = np.array([s.desc for s in steps])
    basis = _feature_basis(world.grid, world.channels)
    features = np.tensordot(desc, basis, axes=(1, 0))
    features += world.feature_noise * rng.normal(size=features.shape)

    env = np.array([sum(1 << ENV_LABELS.index(l) for l in s.env) for s in steps], dtype=np.uint8)
    beh = np.array([sum(1 << BEHAVIOR_LABELS.index(l) for l in s.behavior) for s in steps], dtype=np.uint8)
    return Episode(
        id=episode_id or f"{world.name}-{seed}",
        t=np.arange(n) * STEP_SECONDS,
        motion=motion,
        head=head,
        gaze=gaze,
        goal_xy=np.array([s.goal for s in steps]),
        uncertainty=np.array([s.u for s in steps]),
        env=env,
        behavior=beh,
        features=features.astype(np.float32),
        start_pose=poses[0].copy(),
        meta={"seed": int(seed), "world": world.name, "k_max": sim.g.k_max},
    )


# ---------------------------------------------------------------- worlds

def straight_corridor(length=30.0, **overrides):
    nodes = [Node("a", 0.0, 0.0), Node("b", length, 0.0)]
    return WorldConfig(nodes=nodes, edges=[("a", "b")], route=["a", "b"], name="corridor", **overrides)


def four_way_junction(arm=8.0, **overrides):
    """Cross junction at the origin with equal preferences over all four arms."""
    nodes = [Node("s", -arm, 0.0), Node("j", 0.0, 0.0,
                                        preferences={"s": 1.0, "n": 1.0, "e": 1.0, "w": 1.0}),
             Node("n", 0.0, arm), Node("e", arm, 0.0), Node("w", 0.0, -arm)]
    edges = [("s", "j"), ("j", "n"), ("j", "e"), ("j", "w")]
    overrides.setdefault("wrong_gain", 0.0)
    return WorldConfig(nodes=nodes, edges=edges, route=["s", "j", "e"], name="cross", **overrides)


def random_world(seed, n_legs=(6, 10), leg_length=(6.0, 14.0), branch_length=6.0,
                 p_occluded=0.3, p_signage=0.3, p_crowd=0.2, p_vertical=0.1, p_transition=0.1,
                 **overrides):
    """A random route through junctions of degree 2-4 with side branches."""
    rng = np.random.default_rng([seed, 7919])
    legs = int(rng.integers(n_legs[0], n_legs[1] + 1))
    heading = 0.0
    xy = np.zeros(2)
    nodes = [Node("r0", 0.0, 0.0)]
    edges = []
    route = ["r0"]
    headings = []
    for i in range(1, legs + 1):
        if i > 1:
            heading += float(rng.choice([-math.pi / 2, 0.0, math.pi / 2], p=[0.35, 0.3, 0.35]))
        length = float(rng.uniform(*leg_length))
        xy = xy + length * np.array([math.cos(heading), math.sin(heading)])
        nodes.append(Node(f"r{i}", float(xy[0]), float(xy[1])))
        edges.append((f"r{i - 1}", f"r{i}"))
        route.append(f"r{i}")
        headings.append(heading)
    for i in range(1, legs):
        node = nodes[i]
        node.occluded = bool(rng.uniform() < p_occluded)
        node.signage = bool(rng.uniform() < p_signage)
        node.crowd = bool(rng.uniform() < p_crowd)
        node.vertical = bool(rng.uniform() < p_vertical)
        node.transition = bool(rng.uniform() < p_transition)
        node.distractor = float(rng.uniform(0.2, 1.5))
        used = {round(wrap_angle(headings[i - 1] + math.pi), 3), round(wrap_angle(headings[i]), 3)}
        free = [a for a in (0.0, math.pi / 2, math.pi, -math.pi / 2)
                if round(wrap_angle(headings[i - 1] + a), 3) not in used]
        n_extra = int(rng.choice([0, 1, 2], p=[0.25, 0.4, 0.35]))
        rng.shuffle(free)
        for j, rel in enumerate(free[:n_extra]):
            ang = headings[i - 1] + rel
            bid = f"b{i}_{j}"
            nodes.append(Node(bid, node.x + branch_length * math.cos(ang),
                              node.y + branch_length * math.sin(ang)))
            edges.append((node.id, bid))
    return WorldConfig(nodes=nodes, edges=edges, route=route, name=f"rand{seed}", **overrides)
