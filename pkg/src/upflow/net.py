"""Scene-flow network for particle displacements.

Architecture: three neighborhood set-convolution downsampling levels applied
to both resolutions against shared query centers, a correspondence embedding
at the deepest level (plus a couple of same-resolution smoothing
convolutions), three upsampling levels with skip connections back to the
input particles, and a linear regression head to 3 displacement components.

Every geometric quantity (sampled centers, neighbor lists, kernel weights,
offsets) is computed in a canonical order derived from point coordinates, so
the forward pass is bit-exact equivariant under input permutations.
"""

from __future__ import annotations

import io
import json
import struct
from dataclasses import dataclass

import numpy as np

from .autodiff import Tensor, as_tensor, concat, masked_max, parameter, weighted_sum
from .errors import CenterMismatch, LengthMismatch, NonFiniteLoss
from .kernels import kernel_k
from .particles import HashGrid, ParticleSet

_BN_EPS = 1e-5
_BN_MOMENTUM = 0.1


# -- configuration -------------------------------------------------------------

@dataclass(frozen=True)
class LevelConfig:
    count: int
    radius: float
    widths: tuple[int, ...]
    max_neighbors: int = 32


@dataclass
class NetworkConfig:
    """Layer counts, radii, and MLP widths of the displacement network."""

    levels: tuple[LevelConfig, ...]
    embedding_widths: tuple[int, ...] = (128,)
    embedding_radius: float = 0.5
    smoothing_convs: int = 2
    upconv_widths: tuple[tuple[int, ...], ...] = ((128,), (64,), (32,))
    seed: int = 0

    def __post_init__(self):
        if not self.levels:
            raise ValueError("at least one downsampling level is required")
        for a, b in zip(self.levels[:-1], self.levels[1:]):
            if not (2 * b.count <= a.count or a.count == b.count == 1):
                raise ValueError(
                    f"level counts must at least halve: {a.count} -> {b.count}")
        for lv in self.levels:
            if any(w < 1 for w in lv.widths):
                raise ValueError("mlp widths must be >= 1")
        if len(self.upconv_widths) != len(self.levels):
            raise ValueError("need one upconv width tuple per level")

    @classmethod
    def default(cls, n_particles: int, particle_separation: float,
                seed: int = 0) -> "NetworkConfig":
        """Desk-scale layout: counts N/4, N/16, N/64; radii 2, 4, 8 spacings;
        feature widths 32/64/128. Counts are floored at 8/4/2 so no level
        degenerates to a single neighborhood (whose batch statistics would
        carry zero variance)."""
        ps = particle_separation
        c1 = max(n_particles // 4, 8)
        c2 = max(min(n_particles // 16, c1 // 2), 4)
        c3 = max(min(n_particles // 64, c2 // 2), 2)
        levels = (LevelConfig(c1, 2.0 * ps, (32,)),
                  LevelConfig(c2, 4.0 * ps, (64,)),
                  LevelConfig(c3, 8.0 * ps, (128,)))
        return cls(levels=levels, embedding_widths=(128,),
                   embedding_radius=16.0 * ps,
                   upconv_widths=((128,), (64,), (32,)), seed=seed)

    def to_json(self) -> str:
        return json.dumps({
            "levels": [[lv.count, lv.radius, list(lv.widths), lv.max_neighbors]
                       for lv in self.levels],
            "embedding_widths": list(self.embedding_widths),
            "embedding_radius": self.embedding_radius,
            "smoothing_convs": self.smoothing_convs,
            "upconv_widths": [list(w) for w in self.upconv_widths],
            "seed": self.seed,
        })

    @classmethod
    def from_json(cls, text: str) -> "NetworkConfig":
        d = json.loads(text)
        levels = tuple(LevelConfig(int(c), float(r), tuple(int(x) for x in w), int(mk))
                       for c, r, w, mk in d["levels"])
        return cls(levels=levels,
                   embedding_widths=tuple(d["embedding_widths"]),
                   embedding_radius=float(d["embedding_radius"]),
                   smoothing_convs=int(d["smoothing_convs"]),
                   upconv_widths=tuple(tuple(w) for w in d["upconv_widths"]),
                   seed=int(d["seed"]))


@dataclass
class FeatureSet:
    """Points plus their per-point features; downsampled sets also remember
    the query centers they were grouped against."""

    points: np.ndarray
    features: Tensor
    centers: np.ndarray | None = None

    def __post_init__(self):
        if len(self.points) != len(self.features.value):
            raise LengthMismatch("points and features differ in length")


@dataclass
class TrainingSample:
    """One supervised pair: particles at both resolutions, the ground-truth
    displacement of every low particle, and the per-particle deformation
    weight (normalized |u| in [0, 1]) that feeds the adaptive loss term."""

    x_l: ParticleSet
    x_h: ParticleSet
    gt_displacement: np.ndarray
    lambda_weights: np.ndarray

    def __post_init__(self):
        self.gt_displacement = np.asarray(self.gt_displacement, dtype=np.float64).reshape(-1, 3)
        self.lambda_weights = np.asarray(self.lambda_weights, dtype=np.float64).reshape(-1)
        if len(self.gt_displacement) != self.x_l.count:
            raise LengthMismatch("ground truth length != low particle count")
        if len(self.lambda_weights) != self.x_l.count:
            raise LengthMismatch("lambda length != low particle count")
        if np.any(self.lambda_weights < 0.0):
            raise ValueError("lambda weights must be non-negative")


# -- canonical geometry --------------------------------------------------------

def lexical_order(points: np.ndarray) -> np.ndarray:
    """Permutation sorting points lexicographically by (x, y, z)."""
    return np.lexsort((points[:, 2], points[:, 1], points[:, 0]))


def farthest_point_indices(points: np.ndarray, n: int) -> np.ndarray:
    """Canonical farthest-point sampling.

    Starts at the lexicographically smallest point and breaks distance ties
    toward lexicographically smaller coordinates, so the sequence of sampled
    positions depends only on the point set, never on its order.
    """
    m = len(points)
    n = min(n, m)
    first = lexical_order(points)[0]
    chosen = [int(first)]
    d = np.linalg.norm(points - points[first], axis=1)
    for _ in range(1, n):
        top = d.max()
        cand = np.flatnonzero(d == top)
        if len(cand) > 1:
            sub = points[cand]
            cand = cand[lexical_order(sub)]
        nxt = int(cand[0])
        chosen.append(nxt)
        d = np.minimum(d, np.linalg.norm(points - points[nxt], axis=1))
    return np.asarray(chosen, dtype=np.int64)


def ball_gather(points: np.ndarray, queries: np.ndarray, radius: float,
                max_neighbors: int):
    """Neighbor table (idx, valid) of shape (n_query, max_neighbors).

    Membership is ||p - q|| <= radius; when more than `max_neighbors`
    qualify the closest ones win (ties toward lexicographically smaller
    points). Rows are stored in canonical lexicographic point order so all
    downstream reductions are permutation-stable.
    """
    nq = len(queries)
    idx = np.zeros((nq, max_neighbors), dtype=np.int64)
    valid = np.zeros((nq, max_neighbors), dtype=bool)
    if len(points) == 0:
        return idx, valid
    hg = HashGrid(points, max(radius, 1e-12))
    for j, q in enumerate(queries):
        cand = hg.query_radius(q, radius)
        if len(cand) == 0:
            continue
        sub = points[cand]
        d = np.linalg.norm(sub - q, axis=1)
        sel = np.lexsort((sub[:, 2], sub[:, 1], sub[:, 0], d))[:max_neighbors]
        cand = cand[sel]
        sub = points[cand]
        cand = cand[lexical_order(sub)]
        k = len(cand)
        idx[j, :k] = cand
        valid[j, :k] = True
    return idx, valid


def nearest_indices(points: np.ndarray, queries: np.ndarray) -> np.ndarray:
    """Index of the nearest point for every query (brute force; the coarse
    point sets this serves stay small)."""
    d2 = np.sum((queries[:, None, :] - points[None, :, :]) ** 2, axis=2)
    return np.argmin(d2, axis=1).astype(np.int64)


# -- parameterized pieces -------------------------------------------------------

def _init_mlp(rng, params, stats, prefix: str, in_dim: int, widths):
    d = in_dim
    for ell, w in enumerate(widths):
        scale = np.sqrt(2.0 / d)
        params[f"{prefix}.l{ell}.W"] = parameter(rng.normal(0.0, scale, size=(d, w)))
        params[f"{prefix}.l{ell}.b"] = parameter(np.zeros(w))
        params[f"{prefix}.l{ell}.gamma"] = parameter(np.ones(w))
        params[f"{prefix}.l{ell}.beta"] = parameter(np.zeros(w))
        stats[f"{prefix}.l{ell}.mean"] = np.zeros(w)
        stats[f"{prefix}.l{ell}.var"] = np.ones(w)
        d = w
    return d


def _batchnorm(x: Tensor, gamma: Tensor, beta: Tensor, stats: dict, key: str,
               train: bool, valid: np.ndarray | None, stat_order: np.ndarray | None,
               update: bool = True):
    """BatchNorm over rows: statistics come from the rows of the current
    input set, using only valid rows (3D input) or the canonically re-ordered
    rows (2D input) so they never depend on input permutation.

    The "batch" is always the processed particle cloud itself, at inference
    too: one cloud is one batch here, and exponential running averages taken
    across training clouds turned out to diverge from the per-cloud
    normalization the network actually learns (single-cloud batches, unlike
    the many-clouds-per-batch regime). Running statistics are still tracked
    in training mode for diagnostics; the cycle-consistency pass opts out of
    updating them."""
    if valid is not None:
        mask = valid[:, :, None].astype(np.float64)
        count = float(valid.sum())
        if count == 0.0:
            # a level with no populated neighborhood: normalize trivially
            mean = as_tensor(np.zeros(x.value.shape[-1]))
            var = as_tensor(np.ones(x.value.shape[-1]))
            norm = (x - mean) / (var + _BN_EPS).sqrt()
            return norm * gamma + beta
        mean = (x * mask).sum(axis=(0, 1)) * (1.0 / count)
        cen = x - mean
        var = (cen * cen * mask).sum(axis=(0, 1)) * (1.0 / count)
    else:
        xs = x.gather(stat_order) if stat_order is not None else x
        mean = xs.mean(axis=0)
        cen = xs - mean
        var = (cen * cen).mean(axis=0)
    if train and update:
        stats[f"{key}.mean"] = ((1 - _BN_MOMENTUM) * stats[f"{key}.mean"]
                                + _BN_MOMENTUM * mean.value)
        stats[f"{key}.var"] = ((1 - _BN_MOMENTUM) * stats[f"{key}.var"]
                               + _BN_MOMENTUM * var.value)
    norm = (x - mean) / (var + _BN_EPS).sqrt()
    return norm * gamma + beta


def _mlp(x: Tensor, params: dict, stats: dict, prefix: str, n_layers: int,
         train: bool, valid: np.ndarray | None = None,
         stat_order: np.ndarray | None = None, update: bool = True) -> Tensor:
    """Shared nonlinear map h: (Linear -> BatchNorm -> ReLU) per width."""
    for ell in range(n_layers):
        w = params[f"{prefix}.l{ell}.W"]
        b = params[f"{prefix}.l{ell}.b"]
        if x.value.ndim == 3:
            n, k, c = x.value.shape
            h = (x.reshape(n * k, c) @ w).reshape(n, k, w.value.shape[1]) + b
        else:
            h = x @ w + b
        h = _batchnorm(h, params[f"{prefix}.l{ell}.gamma"],
                       params[f"{prefix}.l{ell}.beta"], stats,
                       f"{prefix}.l{ell}", train, valid, stat_order, update)
        x = h.relu()
    return x


def downsample_conv(points: np.ndarray, feats: Tensor, level: LevelConfig,
                    params: dict, stats: dict, prefix: str, train: bool,
                    query_centers: np.ndarray | None = None,
                    update: bool = True) -> FeatureSet:
    """One set-convolution downsampling level.

    Neighborhood centers come from canonical farthest-point sampling unless
    `query_centers` is given (the high-resolution cloud of a pair reuses the
    centers selected on the low one). Output points are the kernel-weighted
    coordinate averages of each neighborhood; output features are the masked
    max over neighbors of h(scaled feature, offset). Empty neighborhoods
    produce the zero feature at the query center.
    """
    if query_centers is None:
        query_centers = points[farthest_point_indices(points, level.count)]
    idx, valid = ball_gather(points, query_centers, level.radius, level.max_neighbors)
    npos = points[idx]                                      # (n, K, 3)
    dist = np.linalg.norm(npos - query_centers[:, None, :], axis=2)
    w = kernel_k(dist / level.radius) * valid
    wsum = w.sum(axis=1)
    has = wsum > 0.0
    wn = np.where(has[:, None], w / np.maximum(wsum, 1e-300)[:, None], 0.0)
    xbar = np.einsum("nk,nkc->nc", wn, npos)
    xbar = np.where(has[:, None], xbar, query_centers)
    scale = np.linalg.norm(query_centers - xbar, axis=1)    # per-neighborhood |x - xbar|

    gfeat = feats.gather(idx) * scale[:, None, None]
    offsets = npos - query_centers[:, None, :]
    inp = concat([gfeat, as_tensor(offsets)], axis=-1)
    h = _mlp(inp, params, stats, prefix, len(level.widths), train, valid=valid,
             update=update)
    pooled = masked_max(h, valid)
    return FeatureSet(points=xbar, features=pooled, centers=query_centers)


def flow_embedding(low: FeatureSet, high: FeatureSet, radius: float,
                   max_neighbors: int, params: dict, stats: dict, prefix: str,
                   train: bool, smoothing_convs: int,
                   smoothing_radius: float, update: bool = True) -> FeatureSet:
    """Correspondence features between the two resolutions.

    Both inputs must have been grouped against the same query centers. Each
    low entry is paired with the high entries within `radius`; the MLP sees
    the concatenated features plus the low-minus-high positional offset, and
    the pairs are max-pooled. A few same-resolution convolutions then smooth
    the embedded features spatially.
    """
    if low.centers is None or high.centers is None \
            or not np.array_equal(low.centers, high.centers):
        raise CenterMismatch("flow embedding requires matching neighborhood centers")
    idx, valid = ball_gather(high.points, low.points, radius, max_neighbors)
    n = len(low.points)
    k = idx.shape[1]
    self_idx = np.repeat(np.arange(n)[:, None], k, axis=1)
    f3 = low.features.gather(self_idx)
    g3 = high.features.gather(idx)
    offsets = low.points[:, None, :] - high.points[idx]
    inp = concat([f3, g3, as_tensor(offsets)], axis=-1)
    h = _mlp(inp, params, stats, prefix, len_widths(params, prefix), train,
             valid=valid, update=update)
    emb = masked_max(h, valid)
    out = FeatureSet(points=low.points, features=emb, centers=low.centers)
    for s in range(smoothing_convs):
        sp = f"{prefix}.smooth{s}"
        sidx, svalid = ball_gather(out.points, out.points, smoothing_radius,
                                   max_neighbors)
        sfeat = out.features.gather(sidx)
        soff = out.points[:, None, :] - out.points[sidx]
        sinp = concat([sfeat, as_tensor(soff)], axis=-1)
        sh = _mlp(sinp, params, stats, sp, len_widths(params, sp), train,
                  valid=svalid, update=update)
        out = FeatureSet(points=out.points, features=masked_max(sh, svalid),
                         centers=out.centers)
    return out


def len_widths(params: dict, prefix: str) -> int:
    n = 0
    while f"{prefix}.l{n}.W" in params:
        n += 1
    return n


def upsample_conv(coarse: FeatureSet, fine_points: np.ndarray, skip: FeatureSet,
                  radius: float, params: dict, stats: dict, prefix: str,
                  train: bool, max_neighbors: int = 32,
                  update: bool = True) -> FeatureSet:
    """Propagate coarse features to fine points.

    Coarse features within `radius` of each fine point are blended with
    normalized kernel weights (a fine point seeing no coarse point falls
    back to its single nearest one), concatenated with the skip feature at
    that fine point, and passed through the MLP.
    """
    idx, valid = ball_gather(coarse.points, fine_points, radius, max_neighbors)
    dist = np.linalg.norm(coarse.points[idx] - fine_points[:, None, :], axis=2)
    w = kernel_k(dist / radius) * valid
    wsum = w.sum(axis=1)
    dead = wsum <= 0.0
    if dead.any():
        nearest = nearest_indices(coarse.points, fine_points[dead])
        idx[dead, 0] = nearest
        w[dead] = 0.0
        w[dead, 0] = 1.0
        wsum = w.sum(axis=1)
    wn = w / wsum[:, None]
    interp = weighted_sum(coarse.features.gather(idx), wn)
    inp = concat([interp, skip.features], axis=-1)
    order = lexical_order(fine_points)
    out = _mlp(inp, params, stats, prefix, len_widths(params, prefix), train,
               stat_order=order, update=update)
    return FeatureSet(points=fine_points, features=out)


# -- the assembled model --------------------------------------------------------

class DisplacementNet:
    """Config + parameters + batch-norm state, with forward/predict/checkpoint."""

    def __init__(self, config: NetworkConfig, params: dict, stats: dict):
        self.config = config
        self.params = params
        self.stats = stats
        self.train_mode = False

    @classmethod
    def create(cls, config: NetworkConfig) -> "DisplacementNet":
        rng = np.random.default_rng(config.seed)
        params: dict = {}
        stats: dict = {}
        feat_dim = 3  # per-particle input feature: velocity
        dims = []
        d = feat_dim
        for i, lv in enumerate(config.levels):
            d = _init_mlp(rng, params, stats, f"down{i}", d + 3, lv.widths)
            dims.append(d)
        emb_in = 2 * d + 3
        d = _init_mlp(rng, params, stats, "embed", emb_in, config.embedding_widths)
        for s in range(config.smoothing_convs):
            d = _init_mlp(rng, params, stats, f"embed.smooth{s}", d + 3,
                          (config.embedding_widths[-1],))
        skip_dims = [feat_dim] + dims[:-1]
        for j in range(len(config.levels)):
            skip = skip_dims[len(config.levels) - 1 - j]
            d = _init_mlp(rng, params, stats, f"up{j}", d + skip,
                          config.upconv_widths[j])
        params["reg.W"] = parameter(rng.normal(0.0, np.sqrt(1.0 / d), size=(d, 3)))
        params["reg.b"] = parameter(np.zeros(3))
        return cls(config, params, stats)

    @classmethod
    def zeros(cls, config: NetworkConfig) -> "DisplacementNet":
        """All-zero weights; forward output equals the (zero) regression bias."""
        model = cls.create(config)
        for t in model.params.values():
            t.value[...] = 0.0
        return model

    def parameter_names(self):
        return sorted(self.params.keys())

    def zero_grad(self):
        for t in self.params.values():
            t.grad = None

    def forward(self, x_l: ParticleSet, x_h: ParticleSet,
                update_stats: bool = True) -> Tensor:
        """Per-low-particle displacement (count_l, 3) as a tape tensor.

        `update_stats=False` keeps batch-norm running statistics untouched
        (used by the cycle-consistency pass, whose displaced inputs are not
        representative of inference).
        """
        if x_l.count == 0 or x_h.count == 0:
            raise ValueError("forward requires non-empty particle sets")
        cfg = self.config
        train = self.train_mode
        upd = update_stats
        fl = FeatureSet(points=x_l.positions, features=as_tensor(x_l.velocities))
        fh = FeatureSet(points=x_h.positions, features=as_tensor(x_h.velocities))
        skips = [fl]
        cur_l, cur_h = fl, fh
        for i, lv in enumerate(cfg.levels):
            qc = cur_l.points[farthest_point_indices(cur_l.points, lv.count)]
            new_l = downsample_conv(cur_l.points, cur_l.features, lv, self.params,
                                    self.stats, f"down{i}", train,
                                    query_centers=qc, update=upd)
            new_h = downsample_conv(cur_h.points, cur_h.features, lv, self.params,
                                    self.stats, f"down{i}", train,
                                    query_centers=qc, update=upd)
            skips.append(new_l)
            cur_l, cur_h = new_l, new_h
        emb = flow_embedding(cur_l, cur_h, cfg.embedding_radius,
                             cfg.levels[-1].max_neighbors, self.params, self.stats,
                             "embed", train, cfg.smoothing_convs,
                             smoothing_radius=cfg.embedding_radius, update=upd)
        feat = emb
        for j in range(len(cfg.levels)):
            target = skips[len(cfg.levels) - 1 - j]
            radius = cfg.levels[len(cfg.levels) - 1 - j].radius
            feat = upsample_conv(feat, target.points, target, radius, self.params,
                                 self.stats, f"up{j}", train,
                                 max_neighbors=cfg.levels[len(cfg.levels) - 1 - j].max_neighbors,
                                 update=upd)
        return feat.features @ self.params["reg.W"] + self.params["reg.b"]

    def predict(self, x_l: ParticleSet, x_h: ParticleSet) -> np.ndarray:
        """Eval-mode displacements as a plain array."""
        prev = self.train_mode
        self.train_mode = False
        try:
            return self.forward(x_l, x_h).value
        finally:
            self.train_mode = prev

    # -- checkpointing ---------------------------------------------------

    MAGIC = b"FFN1"

    def save(self, path: str):
        with open(path, "wb") as f:
            f.write(self._serialize())

    def _serialize(self) -> bytes:
        buf = io.BytesIO()
        buf.write(self.MAGIC)
        buf.write(struct.pack("<I", 1))
        cfg = self.config.to_json().encode("utf-8")
        buf.write(struct.pack("<I", len(cfg)))
        buf.write(cfg)

        def write_block(entries):
            buf.write(struct.pack("<I", len(entries)))
            for name in sorted(entries):
                arr = entries[name]
                arr = arr.value if isinstance(arr, Tensor) else arr
                data = np.ascontiguousarray(arr, dtype="<f4")
                nm = name.encode("utf-8")
                buf.write(struct.pack("<H", len(nm)))
                buf.write(nm)
                buf.write(struct.pack("<B", data.ndim))
                buf.write(struct.pack(f"<{data.ndim}I", *data.shape))
                buf.write(data.tobytes())
        write_block(self.params)
        write_block(self.stats)
        return buf.getvalue()

    @classmethod
    def load(cls, path: str) -> "DisplacementNet":
        with open(path, "rb") as f:
            raw = f.read()
        return cls._deserialize(raw)

    @classmethod
    def _deserialize(cls, raw: bytes) -> "DisplacementNet":
        buf = io.BytesIO(raw)
        if buf.read(4) != cls.MAGIC:
            raise ValueError("not a displacement-net checkpoint")
        (version,) = struct.unpack("<I", buf.read(4))
        if version != 1:
            raise ValueError(f"unsupported checkpoint version {version}")
        (clen,) = struct.unpack("<I", buf.read(4))
        config = NetworkConfig.from_json(buf.read(clen).decode("utf-8"))

        def read_block():
            (n,) = struct.unpack("<I", buf.read(4))
            out = {}
            for _ in range(n):
                (nlen,) = struct.unpack("<H", buf.read(2))
                name = buf.read(nlen).decode("utf-8")
                (ndim,) = struct.unpack("<B", buf.read(1))
                shape = struct.unpack(f"<{ndim}I", buf.read(4 * ndim))
                count = int(np.prod(shape)) if ndim else 1
                arr = np.frombuffer(buf.read(4 * count), dtype="<f4").reshape(shape)
                out[name] = arr.astype(np.float64)
            return out
        params_raw = read_block()
        stats = read_block()
        params = {k: parameter(v) for k, v in params_raw.items()}
        return cls(config, params, stats)


def neighborhood_assignment(positions: np.ndarray, config: NetworkConfig):
    """Map each particle to its nearest first-level neighborhood center."""
    centers = positions[farthest_point_indices(positions, config.levels[0].count)]
    assign = nearest_indices(centers, positions)
    return assign, centers


# -- loss and training ----------------------------------------------------------

def loss_up(omega, omega_star, omega_back, lam: np.ndarray,
            assignment: np.ndarray):
    """Deformation-aware loss: mean over particles of
    ||w - w*||_1 + lambda_[assignment] * ||w_back - w||_1."""
    omega = as_tensor(omega)
    omega_back = as_tensor(omega_back)
    omega_star = np.asarray(omega_star, dtype=np.float64)
    lam = np.asarray(lam, dtype=np.float64)
    assignment = np.asarray(assignment)
    n = omega.value.shape[0]
    if omega_star.shape[0] != n or omega_back.value.shape[0] != n \
            or assignment.shape[0] != n:
        raise LengthMismatch("loss inputs must share the particle count")
    if np.any(lam < 0.0):
        raise ValueError("lambda weights must be non-negative")
    lam_p = lam[assignment]
    flow_term = (omega - omega_star).abs().sum(axis=1)
    cycle_term = (omega_back - omega).abs().sum(axis=1) * lam_p
    return (flow_term + cycle_term).mean()


def sample_loss(model: DisplacementNet, sample: TrainingSample):
    """Full loss of one sample, including the cycle pass re-predicted from the
    ground-truth-displaced coordinates. Returns (loss tensor, omega tensor)."""
    omega = model.forward(sample.x_l, sample.x_h)
    displaced = ParticleSet(sample.x_l.positions + sample.gt_displacement,
                            sample.x_l.velocities)
    omega_back = model.forward(displaced, sample.x_l, update_stats=False)
    assign, centers = neighborhood_assignment(sample.x_l.positions, model.config)
    lam = np.zeros(len(centers))
    np.add.at(lam, assign, sample.lambda_weights)
    counts = np.zeros(len(centers))
    np.add.at(counts, assign, 1.0)
    lam = np.where(counts > 0, lam / np.maximum(counts, 1.0), 0.0)
    return loss_up(omega, sample.gt_displacement, omega_back, lam, assign), omega


def loss_gradients(model: DisplacementNet, sample: TrainingSample):
    """Loss value and exact parameter gradients for one sample."""
    model.zero_grad()
    loss, _ = sample_loss(model, sample)
    loss.backward()
    grads = {k: (t.grad if t.grad is not None else np.zeros_like(t.value))
             for k, t in model.params.items()}
    return float(loss.value), grads


class AdamState:
    """Adaptive-moment update, bias-corrected."""

    def __init__(self, model: DisplacementNet, lr: float = 1e-3,
                 beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.t = 0
        self.m = {k: np.zeros_like(p.value) for k, p in model.params.items()}
        self.v = {k: np.zeros_like(p.value) for k, p in model.params.items()}

    def step(self, model: DisplacementNet, grads: dict):
        self.t += 1
        b1t = 1.0 - self.beta1 ** self.t
        b2t = 1.0 - self.beta2 ** self.t
        for k in sorted(model.params):
            g = grads[k]
            self.m[k] = self.beta1 * self.m[k] + (1 - self.beta1) * g
            self.v[k] = self.beta2 * self.v[k] + (1 - self.beta2) * g * g
            update = (self.m[k] / b1t) / (np.sqrt(self.v[k] / b2t) + self.eps)
            model.params[k].value -= self.lr * update


def evaluate_loss(model: DisplacementNet, samples: list[TrainingSample]) -> float:
    prev = model.train_mode
    model.train_mode = False
    try:
        vals = [float(sample_loss(model, s)[0].value) for s in samples]
    finally:
        model.train_mode = prev
    return float(np.mean(vals)) if vals else float("nan")


def train(dataset: list[TrainingSample], config: NetworkConfig, epochs: int,
          val: list[TrainingSample] | None = None, lr: float = 1e-3,
          lr_decay: float = 0.1):
    """Adam training loop; deterministic for a fixed config seed.

    The learning rate anneals on a cosine from `lr` to `lr * lr_decay`.
    Returns (model, history) with per-epoch mean train loss and, when a
    validation list is given, per-epoch validation loss.
    """
    if not dataset:
        raise ValueError("training needs a non-empty dataset")
    model = DisplacementNet.create(config)
    opt = AdamState(model, lr=lr)
    rng = np.random.default_rng(config.seed)
    history = {"train": [], "val": []}
    for epoch in range(epochs):
        if epochs > 1:
            frac = epoch / (epochs - 1)
            opt.lr = lr * (lr_decay + (1 - lr_decay)
                           * 0.5 * (1 + np.cos(np.pi * frac)))
        order = rng.permutation(len(dataset))
        model.train_mode = True
        losses = []
        for si in order:
            loss_val, grads = loss_gradients(model, dataset[si])
            if not np.isfinite(loss_val):
                raise NonFiniteLoss(
                    f"non-finite loss {loss_val} at epoch {epoch}, sample {si}")
            opt.step(model, grads)
            losses.append(loss_val)
        model.train_mode = False
        history["train"].append(float(np.mean(losses)))
        if val:
            history["val"].append(evaluate_loss(model, val))
    return model, history
