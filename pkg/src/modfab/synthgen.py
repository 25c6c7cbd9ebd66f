"""Synthetic compositional fab: base functions -> mods -> stages -> products.

A wafer carries a latent state z. Each stage type runs a fixed mod sequence;
each mod applies a stage-specific mixture of shared base functions
(masked affine + tanh maps on z). Products are sequences of stage types and
belong to groups whose stage pools overlap, so held-out products and groups
are built from stage types seen in training.

Per stage the tool logs sensors (noisy linear readout of z at stage entry)
and, for some KQIs, a pass/fail measurement: a threshold on a held-out
readout of z at stage exit, flipped with probability ``label_noise``.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field

import numpy as np

from .data_pipeline import SchemaConfig, Transaction
from .errors import ConfigError


@dataclass
class WorldConfig:
    D: int = 10
    K: int = 4
    B: int = 6
    n_stage_types: int = 8
    n_mod_types: int = 6
    n_products: int = 12
    n_groups: int = 4
    stages_per_product: tuple = (6, 8)
    mods_per_stage: tuple = (1, 3)
    label_noise: float = 0.05
    seed: int = 0
    latent: int = 8
    sensor_noise: float = 0.05
    process_noise: float = 0.02
    mix_rate: float = 0.8
    measure_prob: float = 0.7
    env_missing: float = 0.02
    tool_gap_prob: float = 0.3
    base_rate_range: tuple = (0.3, 0.7)

    def __post_init__(self):
        self.stages_per_product = tuple(self.stages_per_product)
        self.mods_per_stage = tuple(self.mods_per_stage)
        self.base_rate_range = tuple(self.base_rate_range)
        if self.n_products < 2 * self.n_groups:
            raise ConfigError("need n_products >= 2 * n_groups")
        if not 0.0 <= self.label_noise <= 0.2:
            raise ConfigError("label_noise must lie in [0, 0.2]")
        lo, hi = self.stages_per_product
        if not 1 <= lo <= hi:
            raise ConfigError(f"bad stages_per_product {self.stages_per_product}")
        lo, hi = self.mods_per_stage
        if not 1 <= lo <= hi:
            raise ConfigError(f"bad mods_per_stage {self.mods_per_stage}")
        for name in ("D", "K", "B", "n_stage_types", "n_mod_types", "n_groups", "latent"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be positive")


@dataclass
class World:
    cfg: WorldConfig
    base_A: np.ndarray          # (B, L, L)
    base_c: np.ndarray          # (B, L)
    base_mask: np.ndarray       # (B, L) in {0, 1}
    mix: np.ndarray             # (n_stage_types, n_mod_types, B), rows sum to 1
    templates: list             # stage type -> list of mod ids
    products: list              # product -> list of stage types
    product_group: list         # product -> group id
    readout: np.ndarray         # (D, L)
    sensor_offset: np.ndarray   # (D,)
    sensor_scale: np.ndarray    # (D,)
    kqi_readout: np.ndarray     # (K, L)
    thresholds: np.ndarray      # (K,)
    tool_gaps: list             # stage type -> sorted list of absent sensors
    extra: dict = field(default_factory=dict)

    # names used in emitted files
    @staticmethod
    def stage_name(j: int) -> str:
        return f"STG{j:02d}"

    @staticmethod
    def mod_name(m: int) -> str:
        return f"MOD{m:02d}"

    @staticmethod
    def product_name(p: int) -> str:
        return f"PROD{p:02d}"

    @staticmethod
    def group_name(g: int) -> str:
        return f"GRP{g:02d}"

    def schema(self) -> SchemaConfig:
        sensors = [f"S{d:02d}" for d in range(self.cfg.D)]
        kqis = [f"M{k:02d}" for k in range(self.cfg.K)]
        return SchemaConfig(sensors=sensors, measurements=kqis)

    def apply_mod(self, z: np.ndarray, stage_type: int, mod: int) -> np.ndarray:
        """One mod step on a batch of latent states z (N, L)."""
        masked = z[:, None, :] * self.base_mask[None]
        pre = np.einsum("bkl,nbl->nbk", self.base_A, masked) + self.base_c
        out = np.einsum("nbk,b->nk", np.tanh(pre), self.mix[stage_type, mod])
        r = self.cfg.mix_rate
        return (1.0 - r) * z + r * out

    def apply_stage(self, z: np.ndarray, stage_type: int, rng=None) -> np.ndarray:
        for m in self.templates[stage_type]:
            z = self.apply_mod(z, stage_type, m)
            if rng is not None and self.cfg.process_noise > 0:
                z = z + rng.normal(0.0, self.cfg.process_noise, size=z.shape)
        return z

    def kqi_scores(self, z: np.ndarray) -> np.ndarray:
        """Signed distance of each KQI readout from its threshold (>0 is fail)."""
        return z @ self.kqi_readout.T - self.thresholds

    def stage_reuse(self) -> dict:
        """stage type -> number of products using it."""
        counts = {j: 0 for j in range(self.cfg.n_stage_types)}
        for seq in self.products:
            for j in set(seq):
                counts[j] += 1
        return counts

    def product_similarity(self, p: int, q: int) -> float:
        a, b = set(self.products[p]), set(self.products[q])
        return len(a & b) / len(a | b)

    def to_dict(self) -> dict:
        return {
            "config": asdict(self.cfg),
            "base_A": self.base_A.tolist(), "base_c": self.base_c.tolist(),
            "base_mask": self.base_mask.tolist(), "mix": self.mix.tolist(),
            "templates": self.templates, "products": self.products,
            "product_group": self.product_group, "readout": self.readout.tolist(),
            "sensor_offset": self.sensor_offset.tolist(),
            "sensor_scale": self.sensor_scale.tolist(),
            "kqi_readout": self.kqi_readout.tolist(), "thresholds": self.thresholds.tolist(),
            "tool_gaps": self.tool_gaps,
        }

    def dumps(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=1)

    @classmethod
    def from_dict(cls, d: dict) -> "World":
        a = np.asarray
        return cls(WorldConfig(**d["config"]), a(d["base_A"]), a(d["base_c"]),
                   a(d["base_mask"]), a(d["mix"]), [list(t) for t in d["templates"]],
                   [list(p) for p in d["products"]], list(d["product_group"]),
                   a(d["readout"]), a(d["sensor_offset"]), a(d["sensor_scale"]),
                   a(d["kqi_readout"]), a(d["thresholds"]), [list(g) for g in d["tool_gaps"]])

    @classmethod
    def loads(cls, text: str) -> "World":
        return cls.from_dict(json.loads(text))


def _group_pools(n_types: int, n_groups: int, rng) -> list[list[int]]:
    """Overlapping stage pools: every type sits in at least two pools when possible."""
    order = rng.permutation(n_types)
    width = max(2, int(np.ceil(2.5 * n_types / n_groups)))
    width = min(width, n_types)
    step = n_types / n_groups
    return [sorted(int(order[(int(round(g * step)) + i) % n_types]) for i in range(width))
            for g in range(n_groups)]


def _draw_products(cfg: WorldConfig, pools, rng):
    lo, hi = cfg.stages_per_product
    products, groups = [], []
    for p in range(cfg.n_products):
        g = p % cfg.n_groups
        L = int(rng.integers(lo, hi + 1))
        products.append([int(s) for s in rng.choice(pools[g], L)])
        groups.append(g)
    return products, groups


def _reuse_ok(cfg, products, groups) -> bool:
    users = {j: set() for j in range(cfg.n_stage_types)}
    user_groups = {j: set() for j in range(cfg.n_stage_types)}
    for p, seq in enumerate(products):
        for j in seq:
            users[j].add(p)
            user_groups[j].add(groups[p])
    min_groups = 2 if cfg.n_groups >= 2 else 1
    return all(len(users[j]) >= 2 and len(user_groups[j]) >= min_groups
               for j in range(cfg.n_stage_types))


def gen_world(cfg: WorldConfig, max_tries: int = 200) -> World:
    """Deterministic world from ``cfg.seed`` with guaranteed stage-type reuse."""
    rng = np.random.default_rng(cfg.seed)
    L = cfg.latent
    base_A = rng.normal(0.0, 1.5 / np.sqrt(L), size=(cfg.B, L, L))
    base_c = rng.normal(0.0, 0.5, size=(cfg.B, L))
    base_mask = (rng.random((cfg.B, L)) < 0.6).astype(np.float64)
    for b in range(cfg.B):
        if base_mask[b].sum() < 2:
            base_mask[b, rng.choice(L, 2, replace=False)] = 1.0
    logits = rng.normal(0.0, 2.0, size=(cfg.n_stage_types, cfg.n_mod_types, cfg.B))
    mix = np.exp(logits - logits.max(axis=2, keepdims=True))
    mix /= mix.sum(axis=2, keepdims=True)
    lo, hi = cfg.mods_per_stage
    templates = [[int(m) for m in rng.integers(0, cfg.n_mod_types, rng.integers(lo, hi + 1))]
                 for _ in range(cfg.n_stage_types)]

    if cfg.stages_per_product[1] * cfg.n_products < 2 * cfg.n_stage_types:
        raise ConfigError("too few stage slots for every stage type to be used twice")
    pools = _group_pools(cfg.n_stage_types, cfg.n_groups, rng)
    for _ in range(max_tries):
        products, groups = _draw_products(cfg, pools, rng)
        if _reuse_ok(cfg, products, groups):
            break
    else:
        raise ConfigError("could not draw products that reuse every stage type")

    readout = rng.normal(0.0, 1.0 / np.sqrt(L), size=(cfg.D, L))
    sensor_offset = rng.uniform(-50.0, 250.0, size=cfg.D).round(1)
    sensor_scale = rng.uniform(1.0, 20.0, size=cfg.D).round(2)
    kqi_readout = rng.normal(0.0, 1.0 / np.sqrt(L), size=(cfg.K, L))
    tool_gaps = []
    for _ in range(cfg.n_stage_types):
        if rng.random() < cfg.tool_gap_prob:
            n = int(rng.integers(1, 3))
            tool_gaps.append(sorted(int(d) for d in rng.choice(cfg.D, n, replace=False)))
        else:
            tool_gaps.append([])
    world = World(cfg, base_A, base_c, base_mask, mix, templates, products, groups, readout,
                  sensor_offset, sensor_scale, kqi_readout, np.zeros(cfg.K), tool_gaps)
    world.thresholds = _calibrate_thresholds(world, rng)
    return world


def _initial_states(n: int, L: int, rng) -> np.ndarray:
    return rng.uniform(-0.8, 0.8, size=(n, L))


def _exit_readouts(world: World, n: int, rng) -> np.ndarray:
    """KQI readouts (n_stage_instances, K) from a pilot draw of wafers."""
    cfg = world.cfg
    prods = rng.integers(0, cfg.n_products, n)
    z = _initial_states(n, cfg.latent, rng)
    out = []
    for p in range(cfg.n_products):
        zp = z[prods == p]
        for j in world.products[p]:
            zp = world.apply_stage(zp, j, rng)
            out.append(zp @ world.kqi_readout.T)
    return np.concatenate(out, axis=0)


def _calibrate_thresholds(world: World, rng, n_pilot: int = 10_000) -> np.ndarray:
    """Bisection on each KQI threshold to hit a target fail rate."""
    r = _exit_readouts(world, n_pilot, rng)
    lo_rate, hi_rate = world.cfg.base_rate_range
    targets = rng.uniform(lo_rate, hi_rate, size=world.cfg.K)
    th = np.zeros(world.cfg.K)
    for k in range(world.cfg.K):
        lo, hi = r[:, k].min() - 1.0, r[:, k].max() + 1.0
        for _ in range(60):
            mid = 0.5 * (lo + hi)
            if (r[:, k] > mid).mean() > targets[k]:
                lo = mid
            else:
                hi = mid
        th[k] = 0.5 * (lo + hi)
    return th


@dataclass
class SynthData:
    transactions: list
    schema: SchemaConfig
    truth: dict   # wafer id -> {"product": p, "z0": [...]}


def gen_dataset(world: World, n_wafers: int, seed: int = 0, noise: bool = True) -> SynthData:
    """Simulate ``n_wafers`` wafers and emit their transaction rows.

    Each wafer draws from its own generator seeded by (seed, wafer index), so
    wafers are independent of generation order. ``noise=False`` switches off
    sensor, process and label noise as well as environmental gaps.
    """
    if n_wafers < 1:
        raise ConfigError("n_wafers must be >= 1")
    cfg = world.cfg
    schema = world.schema()
    rows: list[Transaction] = []
    truth = {}
    for i in range(n_wafers):
        rng = np.random.default_rng([seed, i])
        p = int(rng.integers(0, cfg.n_products))
        z = _initial_states(1, cfg.latent, rng)
        wafer = f"W{seed:03d}-{i:06d}"
        truth[wafer] = {"product": p, "z0": z[0].tolist()}
        clock = 1_600_000_000_000 + int(rng.integers(0, 10**9))
        for s, j in enumerate(world.products[p]):
            entry = z
            z = world.apply_stage(z, j, rng if noise else None)
            template = world.templates[j]
            scores = world.kqi_scores(z)[0]
            labels = (scores > 0).astype(int)
            if noise and cfg.label_noise > 0:
                flip = rng.random(cfg.K) < cfg.label_noise
                labels = np.where(flip, 1 - labels, labels)
            measured = rng.random(cfg.K) < cfg.measure_prob if noise else np.ones(cfg.K, bool)
            for r, m in enumerate(template):
                sig = world.readout @ entry[0]
                if noise:
                    sig = sig + rng.normal(0.0, cfg.sensor_noise, size=cfg.D)
                vals = world.sensor_offset + world.sensor_scale * sig
                sensors = []
                for d in range(cfg.D):
                    gone = d in world.tool_gaps[j] or (noise and rng.random() < cfg.env_missing)
                    sensors.append(None if gone else round(float(vals[d]), 6))
                last = r == len(template) - 1
                meas = tuple(int(labels[k]) if (last and measured[k]) else None
                             for k in range(cfg.K))
                rows.append(Transaction(
                    wafer_id=wafer, timestamp=clock, process=f"PROC{s // 3:02d}",
                    step=f"STEP{s:02d}", stage_type=World.stage_name(j),
                    mod_label=World.mod_name(m), recipe=f"RCP{p:02d}{j:02d}",
                    tool=f"TOOL{j:02d}", product_type=World.product_name(p),
                    product_group=World.group_name(world.product_group[p]),
                    sensors=tuple(sensors), measurements=meas))
                clock += 60_000
    return SynthData(rows, schema, truth)


def oracle_scores(world: World, truth: dict, wafer: str) -> np.ndarray:
    """Noise-free replay of one wafer: (stages, K) signed KQI scores."""
    info = truth[wafer]
    z = np.asarray([info["z0"]])
    out = []
    for j in world.products[info["product"]]:
        z = world.apply_stage(z, j)
        out.append(world.kqi_scores(z)[0])
    return np.array(out)
