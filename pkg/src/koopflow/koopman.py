"""The learned model (encoder phi, decoder psi, evolution matrix K), its loss
functions, the two-stage training procedure, and checkpoint I/O.

Loss terms, all squared Euclidean norms:

    pred_dt(i, t) = ||x_{i,t+dt} - psi(K^dt phi(x_{i,t}))||^2
    lin_dt(i, t)  = ||phi(x_{i,t+dt}) - K^dt phi(x_{i,t})||^2   (lin_0 == 0)
    orth          = ||K K^T - I||_F^2

Stage 1 minimizes the short-horizon combination pred_0 + pred_1 + pred_5 +
lin_1 + lin_5 (+ beta1*orth) over sampled (trajectory, t) pairs; stage 2
re-trains with full rollouts from each trajectory's first sample:
pred_0(i, t) + pred_t(i, 0) + lin_t(i, 0) summed over t (+ beta2*orth).
Batch losses are means over the sampled (i, t) terms. Gradients are exact
reverse-mode, assembled from the mlp building blocks plus BPTT through the
K-power chain; they are validated against central finite differences.
"""

from __future__ import annotations

import hashlib
import struct
from dataclasses import dataclass, field

import numpy as np

from . import numlin
from .errors import CheckpointError, DimensionMismatch, NonFinite, TrajectoryTooShort
from .net import (
    AdamState,
    Mlp,
    ParamLayout,
    adam_step,
    mlp_backward,
    mlp_forward,
    mlp_forward_cached,
    mlp_init,
    pack,
    unpack,
)

CHECKPOINT_MAGIC = b"KOOPCKPT"
CHECKPOINT_VERSION = 1


@dataclass
class KoopmanModel:
    encoder: Mlp  # n -> d
    decoder: Mlp  # d -> n
    K: np.ndarray  # (d, d)

    @property
    def n(self) -> int:
        return self.encoder.in_dim

    @property
    def d(self) -> int:
        return self.encoder.out_dim

    def __post_init__(self):
        d = self.encoder.out_dim
        if self.decoder.in_dim != d or self.K.shape != (d, d):
            raise DimensionMismatch(
                f"latent dims do not chain: encoder out {d}, "
                f"decoder in {self.decoder.in_dim}, K {self.K.shape}"
            )
        if self.decoder.out_dim != self.encoder.in_dim:
            raise DimensionMismatch("decoder output dim must equal encoder input dim")

    def copy(self) -> "KoopmanModel":
        return KoopmanModel(self.encoder.copy(), self.decoder.copy(), self.K.copy())


def model_init(
    n: int,
    d: int,
    hidden=(256, 128),
    seed: int = 0,
    obs_shift: np.ndarray | None = None,
    obs_scale: np.ndarray | None = None,
    k_noise: float = 0.01,
) -> KoopmanModel:
    """Fresh model: fan-in-scaled uniform MLPs, K = I + small uniform noise.

    If per-component observation statistics are given, they are folded into
    the first encoder layer and last decoder layer at initialization (the
    layers then start out operating on standardized observations); this is
    initialization only, the model class is unchanged.
    """
    rng = np.random.default_rng(np.random.SeedSequence((seed, 0)))
    encoder = mlp_init((n, *hidden, d), rng)
    decoder = mlp_init((d, *tuple(reversed(tuple(hidden))), n), rng)
    k = np.eye(d) + rng.uniform(-k_noise, k_noise, size=(d, d))
    if obs_shift is not None or obs_scale is not None:
        shift = np.zeros(n) if obs_shift is None else np.asarray(obs_shift, dtype=float)
        scale = np.ones(n) if obs_scale is None else np.asarray(obs_scale, dtype=float)
        scale = np.where(scale > 1e-8, scale, 1.0)
        encoder.weights[0] = encoder.weights[0] / scale[None, :]
        encoder.biases[0] = -(encoder.weights[0] @ shift)
        decoder.weights[-1] = decoder.weights[-1] * scale[:, None]
        decoder.biases[-1] = shift.copy()
    return KoopmanModel(encoder, decoder, k)


def encode(model: KoopmanModel, x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    if x.shape[-1] != model.n:
        raise DimensionMismatch(f"observation dim {x.shape[-1]}, model expects {model.n}")
    return mlp_forward(model.encoder, x)


def decode(model: KoopmanModel, z: np.ndarray) -> np.ndarray:
    z = np.asarray(z, dtype=float)
    if z.shape[-1] != model.d:
        raise DimensionMismatch(f"latent dim {z.shape[-1]}, model expects {model.d}")
    return mlp_forward(model.decoder, z)


def predict_discrete(model: KoopmanModel, x: np.ndarray, steps: int) -> np.ndarray:
    """psi(K^steps phi(x)); steps = 0 is the autoencoder reconstruction."""
    if steps < 0:
        raise ValueError("steps must be >= 0")
    z = encode(model, x)
    z = z @ numlin.matrix_power(model.K, steps).T
    if not np.isfinite(z).all():
        raise NonFinite(f"latent rollout over {steps} steps left the float range")
    return decode(model, z)


# ---------------------------------------------------------------------------
# Loss values (single pair / model level).


def loss_pred(model: KoopmanModel, x_t, x_tdt, dt: int) -> float:
    """||x_{t+dt} - psi(K^dt phi(x_t))||^2 for one sample pair."""
    diff = np.asarray(x_tdt, dtype=float) - predict_discrete(model, x_t, dt)
    return float(np.dot(diff, diff))


def loss_lin(model: KoopmanModel, x_t, x_tdt, dt: int) -> float:
    """||phi(x_{t+dt}) - K^dt phi(x_t)||^2; exactly 0 at dt = 0."""
    if dt == 0:
        return 0.0
    z_t = encode(model, x_t)
    z_dt = encode(model, x_tdt)
    diff = z_dt - z_t @ numlin.matrix_power(model.K, dt).T
    return float(np.dot(diff, diff))


def loss_orth(model: KoopmanModel) -> float:
    return numlin.orth_defect(model.K)


@dataclass
class LossBreakdown:
    """Per-term loss telemetry; total is the weighted sum of the terms."""

    terms: dict
    weights: dict
    total: float
    epoch: int = -1
    split: str = ""
    stage: int = 0

    @classmethod
    def build(cls, terms: dict, weights: dict, **kw) -> "LossBreakdown":
        total = sum(weights.get(name, 1.0) * value for name, value in terms.items())
        return cls(terms=terms, weights=weights, total=float(total), **kw)

    def first_nonfinite_term(self):
        for name, value in self.terms.items():
            if not np.isfinite(value):
                return name
        return None


# ---------------------------------------------------------------------------
# Batched loss kernels with exact gradients.


def _orth_value_grad(k: np.ndarray):
    e = k @ k.T - np.eye(k.shape[0])
    return float(np.sum(e * e)), 4.0 * e @ k


def _model_grads_to_flat(layout: ParamLayout, enc_grads, dec_grads, dk) -> np.ndarray:
    arrays = {}
    for l, (dw, db) in enumerate(enc_grads):
        arrays[f"enc_w{l}"] = dw
        arrays[f"enc_b{l}"] = db
    for l, (dw, db) in enumerate(dec_grads):
        arrays[f"dec_w{l}"] = dw
        arrays[f"dec_b{l}"] = db
    arrays["K"] = dk
    return pack(layout, arrays)


def l1_kernel(model: KoopmanModel, x0, x1, x5, beta1: float, layout: ParamLayout | None = None):
    """Short-horizon loss over a batch of (x_t, x_{t+1}, x_{t+5}) triples.

    Returns (LossBreakdown, flat gradient or None). Terms are means over the
    batch: pred_0 + pred_1 + pred_5 + lin_1 + lin_5 + beta1 * orth.
    """
    b = x0.shape[0]
    k = model.K
    want_grad = layout is not None

    x_cat = np.concatenate([x0, x1, x5], axis=0)
    z_cat, enc_cache = mlp_forward_cached(model.encoder, x_cat)
    z0, z1e, z5e = z_cat[:b], z_cat[b : 2 * b], z_cat[2 * b :]

    # Latent rollout z0 -> K z0 -> ... -> K^5 z0, keeping intermediates for BPTT.
    zp = [z0]
    for _ in range(5):
        zp.append(zp[-1] @ k.T)

    dec_in = np.concatenate([z0, zp[1], zp[5]], axis=0)
    y_cat, dec_cache = mlp_forward_cached(model.decoder, dec_in)
    r0 = y_cat[:b] - x0
    r1 = y_cat[b : 2 * b] - x1
    r5 = y_cat[2 * b :] - x5
    l1res = z1e - zp[1]
    l5res = z5e - zp[5]

    orth_val, orth_grad = _orth_value_grad(k)
    terms = {
        "pred_0": float(np.sum(r0 * r0)) / b,
        "pred_1": float(np.sum(r1 * r1)) / b,
        "pred_5": float(np.sum(r5 * r5)) / b,
        "lin_1": float(np.sum(l1res * l1res)) / b,
        "lin_5": float(np.sum(l5res * l5res)) / b,
        "orth": orth_val,
    }
    weights = {"orth": beta1}
    breakdown = LossBreakdown.build(terms, weights)
    if not want_grad:
        return breakdown, None

    scale = 2.0 / b
    dy_cat = scale * np.concatenate([r0, r1, r5], axis=0)
    d_dec_in, dec_grads = mlp_backward(model.decoder, dec_cache, dy_cat)
    dz0 = d_dec_in[:b].copy()
    dzp = [np.zeros_like(z0) for _ in range(6)]
    dzp[1] = d_dec_in[b : 2 * b] - scale * l1res
    dzp[5] = d_dec_in[2 * b :] - scale * l5res
    dz1e = scale * l1res
    dz5e = scale * l5res

    # BPTT through zp[j] = zp[j-1] @ K^T.
    dk = beta1 * orth_grad
    adj = dzp[5]
    for j in range(5, 0, -1):
        dk += adj.T @ zp[j - 1]
        adj = dzp[j - 1] + adj @ k
    dz0 += adj

    dz_cat = np.concatenate([dz0, dz1e, dz5e], axis=0)
    _, enc_grads = mlp_backward(model.encoder, enc_cache, dz_cat)
    return breakdown, _model_grads_to_flat(layout, enc_grads, dec_grads, dk)


def rollout_kernel(
    model: KoopmanModel,
    states: np.ndarray,
    pred_w: np.ndarray,
    lin_w: np.ndarray,
    recon_w: np.ndarray,
    orth_weight: float,
    layout: ParamLayout | None = None,
):
    """Long-horizon loss over a (B, H+1, n) batch of trajectory prefixes.

    Per trajectory i and time t the contributions are
        recon_w[t] * pred_0(i, t)  +  pred_w[t] * pred_t(i, 0)  +  lin_w[t] * lin_t(i, 0)
    averaged over all B*(H+1) (i, t) pairs, plus orth_weight * orth. The same
    kernel serves the plain long-term loss (all weights 1) and the
    delta-discounted baseline (pred_w = lin_w-proportional geometric weights,
    recon_w = 0).
    """
    b, hp1, n = states.shape
    k = model.K
    want_grad = layout is not None
    n_pairs = b * hp1

    flat_states = states.reshape(n_pairs, n)
    z_all, enc_cache = mlp_forward_cached(model.encoder, flat_states)
    zr = z_all.reshape(b, hp1, -1)

    zhat = np.empty_like(zr.transpose(1, 0, 2))  # (H+1, B, d)
    zhat[0] = zr[:, 0]
    for t in range(1, hp1):
        zhat[t] = zhat[t - 1] @ k.T

    use_recon = bool(np.any(recon_w != 0.0))
    zhat_flat = zhat.reshape(n_pairs, -1)
    dec_in = np.concatenate([z_all, zhat_flat], axis=0) if use_recon else zhat_flat
    y_cat, dec_cache = mlp_forward_cached(model.decoder, dec_in)
    if use_recon:
        r_rec = (y_cat[:n_pairs] - flat_states).reshape(b, hp1, n)
        y_roll = y_cat[n_pairs:]
    else:
        r_rec = None
        y_roll = y_cat
    r_roll = y_roll.reshape(hp1, b, n) - states.transpose(1, 0, 2)
    lin_res = zr.transpose(1, 0, 2) - zhat  # exactly 0 at t = 0

    sq_roll = np.einsum("tbn,tbn->t", r_roll, r_roll)
    sq_lin = np.einsum("tbd,tbd->t", lin_res, lin_res)
    orth_val, orth_grad = _orth_value_grad(k)
    terms = {
        "pred_roll": float(pred_w @ sq_roll) / n_pairs,
        "lin_roll": float(lin_w @ sq_lin) / n_pairs,
        "orth": orth_val,
    }
    if use_recon:
        sq_rec = np.einsum("btn,btn->t", r_rec, r_rec)
        terms = {"pred_0": float(recon_w @ sq_rec) / n_pairs, **terms}
    weights = {"orth": orth_weight}
    breakdown = LossBreakdown.build(terms, weights)
    if not want_grad:
        return breakdown, None

    scale = 2.0 / n_pairs
    dy_roll = scale * pred_w[:, None, None] * r_roll
    if use_recon:
        dy_rec = scale * recon_w[None, :, None] * r_rec
        dy_cat = np.concatenate([dy_rec.reshape(n_pairs, n), dy_roll.reshape(n_pairs, n)], axis=0)
    else:
        dy_cat = dy_roll.reshape(n_pairs, n)
    d_dec_in, dec_grads = mlp_backward(model.decoder, dec_cache, dy_cat)

    dz_lin = scale * lin_w[:, None, None] * lin_res
    dzhat = d_dec_in[n_pairs:].reshape(hp1, b, -1) if use_recon else d_dec_in.reshape(hp1, b, -1)
    dzhat = dzhat - dz_lin

    dk = orth_weight * orth_grad
    adj = dzhat[hp1 - 1]
    for t in range(hp1 - 1, 0, -1):
        dk += adj.T @ zhat[t - 1]
        adj = dzhat[t - 1] + adj @ k

    dzr = dz_lin.transpose(1, 0, 2).copy()  # encoder receives +lin gradient
    dzr[:, 0] += adj
    dz_all = dzr.reshape(n_pairs, -1)
    if use_recon:
        dz_all = dz_all + d_dec_in[:n_pairs]
    _, enc_grads = mlp_backward(model.encoder, enc_cache, dz_all)
    return breakdown, _model_grads_to_flat(layout, enc_grads, dec_grads, dk)


def _stack_states(trajectories, horizon_cap: int | None = None) -> np.ndarray:
    lengths = {t.n_samples for t in trajectories}
    if len(lengths) != 1:
        raise ValueError(f"trajectories must share a sample count, got {sorted(lengths)}")
    states = np.stack([t.states for t in trajectories])
    if horizon_cap is not None:
        h = min(states.shape[1] - 1, horizon_cap)
        states = states[:, : h + 1]
    return states


def loss_L1(model: KoopmanModel, trajectories, beta1: float,
            epoch: int = -1, split: str = "") -> LossBreakdown:
    """Short-horizon loss over every valid (trajectory, t) pair."""
    states = _stack_states(trajectories)
    m, t_len, _ = states.shape
    if t_len < 6:
        raise TrajectoryTooShort(f"short-horizon loss needs T >= 6 samples, got {t_len}")
    idx_i, idx_t = np.meshgrid(np.arange(m), np.arange(t_len - 5), indexing="ij")
    idx_i, idx_t = idx_i.ravel(), idx_t.ravel()
    breakdown, _ = l1_kernel(
        model, states[idx_i, idx_t], states[idx_i, idx_t + 1], states[idx_i, idx_t + 5], beta1
    )
    breakdown.epoch, breakdown.split, breakdown.stage = epoch, split, 1
    return breakdown


def loss_L2(model: KoopmanModel, trajectories, beta2: float, horizon_cap: int = 200,
            epoch: int = -1, split: str = "") -> LossBreakdown:
    """Long-horizon rollout loss, Eq-style term set, capped at horizon_cap steps."""
    if not isinstance(trajectories, (list, tuple)):
        trajectories = [trajectories]
    states = _stack_states(trajectories, horizon_cap)
    hp1 = states.shape[1]
    ones = np.ones(hp1)
    breakdown, _ = rollout_kernel(model, states, ones, ones, ones, beta2)
    breakdown.epoch, breakdown.split, breakdown.stage = epoch, split, 2
    return breakdown


def loss_long_baseline(model: KoopmanModel, trajectories, delta: float, beta: float,
                       orth_weight: float = 0.0, horizon_cap: int | None = None) -> LossBreakdown:
    """Geometrically discounted rollout loss: sum_t delta^t pred_t + beta delta^t lin_t.

    No per-t reconstruction sum; orthogonality enters only through orth_weight.
    """
    if not 0.0 < delta <= 1.0:
        raise ValueError("delta must be in (0, 1]")
    if not isinstance(trajectories, (list, tuple)):
        trajectories = [trajectories]
    states = _stack_states(trajectories, horizon_cap)
    hp1 = states.shape[1]
    disc = delta ** np.arange(hp1)
    breakdown, _ = rollout_kernel(
        model, states, disc, beta * disc, np.zeros(hp1), orth_weight
    )
    breakdown.stage = 2
    return breakdown


# ---------------------------------------------------------------------------
# Parameter layout and checkpoints.


def model_layout(enc_dims, dec_dims) -> ParamLayout:
    segs = []
    for l, (i, o) in enumerate(zip(enc_dims[:-1], enc_dims[1:])):
        segs.append((f"enc_w{l}", (o, i)))
        segs.append((f"enc_b{l}", (o,)))
    for l, (i, o) in enumerate(zip(dec_dims[:-1], dec_dims[1:])):
        segs.append((f"dec_w{l}", (o, i)))
        segs.append((f"dec_b{l}", (o,)))
    d = enc_dims[-1]
    segs.append(("K", (d, d)))
    return ParamLayout.build(segs)


def pack_model(layout: ParamLayout, model: KoopmanModel) -> np.ndarray:
    arrays = {}
    for l, (w, b) in enumerate(zip(model.encoder.weights, model.encoder.biases)):
        arrays[f"enc_w{l}"] = w
        arrays[f"enc_b{l}"] = b
    for l, (w, b) in enumerate(zip(model.decoder.weights, model.decoder.biases)):
        arrays[f"dec_w{l}"] = w
        arrays[f"dec_b{l}"] = b
    arrays["K"] = model.K
    return pack(layout, arrays)


def model_from_flat(layout: ParamLayout, flat: np.ndarray, enc_dims, dec_dims) -> KoopmanModel:
    arrays = unpack(layout, flat)
    n_enc = len(enc_dims) - 1
    n_dec = len(dec_dims) - 1
    encoder = Mlp(
        [arrays[f"enc_w{l}"] for l in range(n_enc)], [arrays[f"enc_b{l}"] for l in range(n_enc)]
    )
    decoder = Mlp(
        [arrays[f"dec_w{l}"] for l in range(n_dec)], [arrays[f"dec_b{l}"] for l in range(n_dec)]
    )
    return KoopmanModel(encoder, decoder, arrays["K"])


def _payload_checksum(payload: bytes) -> int:
    return int.from_bytes(hashlib.sha256(payload).digest()[:8], "little")


def save_checkpoint(model: KoopmanModel, path) -> None:
    """Binary little-endian checkpoint: header, parameters, 64-bit checksum."""
    enc_dims = model.encoder.dims
    dec_dims = model.decoder.dims
    layout = model_layout(enc_dims, dec_dims)
    flat = pack_model(layout, model)
    payload = flat.astype("<f8").tobytes()

    parts = [CHECKPOINT_MAGIC, struct.pack("<III", CHECKPOINT_VERSION, model.n, model.d)]
    for dims in (enc_dims, dec_dims):
        parts.append(struct.pack("<I", len(dims)))
        parts.append(struct.pack(f"<{len(dims)}I", *dims))
    parts.append(struct.pack("<Q", flat.size))
    parts.append(payload)
    parts.append(struct.pack("<Q", _payload_checksum(payload)))
    with open(path, "wb") as f:
        f.write(b"".join(parts))


def load_checkpoint(path) -> KoopmanModel:
    with open(path, "rb") as f:
        blob = f.read()
    try:
        if blob[:8] != CHECKPOINT_MAGIC:
            raise CheckpointError(f"{path}: not a model checkpoint")
        pos = 8
        version, n, d = struct.unpack_from("<III", blob, pos)
        pos += 12
        if version != CHECKPOINT_VERSION:
            raise CheckpointError(f"{path}: checkpoint version {version}, expected {CHECKPOINT_VERSION}")
        dims_pair = []
        for _ in range(2):
            (count,) = struct.unpack_from("<I", blob, pos)
            pos += 4
            dims_pair.append(struct.unpack_from(f"<{count}I", blob, pos))
            pos += 4 * count
        enc_dims, dec_dims = dims_pair
        (n_params,) = struct.unpack_from("<Q", blob, pos)
        pos += 8
        payload = blob[pos : pos + 8 * n_params]
        if len(payload) != 8 * n_params:
            raise CheckpointError(f"{path}: truncated parameter payload")
        pos += 8 * n_params
        (stored,) = struct.unpack_from("<Q", blob, pos)
        pos += 8
        if pos != len(blob):
            raise CheckpointError(f"{path}: trailing bytes after checksum")
    except struct.error as exc:
        raise CheckpointError(f"{path}: truncated checkpoint ({exc})") from exc
    if stored != _payload_checksum(payload):
        raise CheckpointError(f"{path}: checksum mismatch, file corrupt")
    flat = np.frombuffer(payload, dtype="<f8").astype(float)
    layout = model_layout(enc_dims, dec_dims)
    if layout.total != n_params or enc_dims[0] != n or enc_dims[-1] != d:
        raise CheckpointError(f"{path}: header dims inconsistent with payload")
    return model_from_flat(layout, flat, enc_dims, dec_dims)


# ---------------------------------------------------------------------------
# Two-stage training.


@dataclass
class TrainConfig:
    d: int = 16
    hidden: tuple = (256, 128)
    stage1_epochs: int = 100
    stage2_epochs: int = 100
    lr: float = 1e-3
    batch_size: int = 256
    beta1: float = 10.0
    beta2: float = 10.0
    horizon_cap: int = 200
    baseline_variant: tuple | None = None  # (delta, beta) enables the discounted loss in stage 2
    stage1_batches_per_epoch: int | None = None  # None = full pass over all pairs
    input_norm: bool = True
    k_noise: float = 0.01
    seed: int = 0

    def __post_init__(self):
        if self.beta1 < 0 or self.beta2 < 0:
            raise ValueError("orthogonality weights must be >= 0")
        if self.horizon_cap < 1:
            raise ValueError("horizon_cap must be >= 1")
        if self.baseline_variant is not None:
            delta, _ = self.baseline_variant
            if not 0.0 < delta <= 1.0:
                raise ValueError("baseline delta must be in (0, 1]")


def _check_finite(breakdown: LossBreakdown, stage: int, epoch: int) -> None:
    bad = breakdown.first_nonfinite_term()
    if bad is not None or not np.isfinite(breakdown.total):
        raise NonFinite(
            f"stage {stage} epoch {epoch}: loss term {bad or 'total'} is non-finite"
        )


def train_two_stage(dataset, config: TrainConfig):
    """Stage 1 on the short-horizon loss, then stage 2 (warm start, fresh
    optimizer moments) on the rollout loss. Returns (model, history).

    The kept stage-2 model is the epoch with the best validation rollout loss
    (train loss when the dataset has no validation split). Deterministic given
    (dataset, config).
    """
    train = dataset.split("train")
    if not train:
        raise ValueError("dataset has no training trajectories")
    val = dataset.split("val")
    states = _stack_states(train)
    m, t_len, n = states.shape
    if t_len < 6:
        raise TrajectoryTooShort(f"stage 1 needs T >= 6 samples, got {t_len}")

    obs_shift = obs_scale = None
    if config.input_norm:
        flat = states.reshape(-1, n)
        obs_shift = flat.mean(axis=0)
        obs_scale = flat.std(axis=0)

    model = model_init(
        n,
        config.d,
        hidden=config.hidden,
        seed=config.seed,
        obs_shift=obs_shift,
        obs_scale=obs_scale,
        k_noise=config.k_noise,
    )
    enc_dims, dec_dims = model.encoder.dims, model.decoder.dims
    layout = model_layout(enc_dims, dec_dims)
    params = pack_model(layout, model)
    history = []

    # Stage 1: mini-batches over all valid (trajectory, t) pairs.
    rng = np.random.default_rng(np.random.SeedSequence((config.seed, 1)))
    pair_i, pair_t = np.meshgrid(np.arange(m), np.arange(t_len - 5), indexing="ij")
    pair_i, pair_t = pair_i.ravel(), pair_t.ravel()
    n_pairs = pair_i.size
    opt = AdamState.init(layout.total, lr=config.lr)
    for epoch in range(config.stage1_epochs):
        order = rng.permutation(n_pairs)
        starts = range(0, n_pairs, config.batch_size)
        if config.stage1_batches_per_epoch is not None:
            starts = list(starts)[: config.stage1_batches_per_epoch]
        term_sums, weight_seen, seen = {}, {}, 0
        for s in starts:
            sel = order[s : s + config.batch_size]
            bi, bt = pair_i[sel], pair_t[sel]
            breakdown, grad = l1_kernel(
                model, states[bi, bt], states[bi, bt + 1], states[bi, bt + 5],
                config.beta1, layout,
            )
            _check_finite(breakdown, 1, epoch)
            params = adam_step(params, grad, opt)
            model = model_from_flat(layout, params, enc_dims, dec_dims)
            for name, value in breakdown.terms.items():
                term_sums[name] = term_sums.get(name, 0.0) + value * sel.size
            weight_seen = breakdown.weights
            seen += sel.size
        mean_terms = {name: v / seen for name, v in term_sums.items()}
        history.append(
            LossBreakdown.build(mean_terms, weight_seen, epoch=epoch, split="train", stage=1)
        )
        if val:
            history.append(loss_L1(model, val, config.beta1, epoch=epoch, split="val"))

    if config.stage2_epochs == 0:
        return model, history

    # Stage 2: full-trajectory batches, warm start, fresh moments.
    opt = AdamState.init(layout.total, lr=config.lr)
    h = min(t_len - 1, config.horizon_cap)
    roll_states = states[:, : h + 1]
    hp1 = h + 1
    if config.baseline_variant is not None:
        delta, beta = config.baseline_variant
        pred_w = delta ** np.arange(hp1)
        lin_w = beta * pred_w
        recon_w = np.zeros(hp1)
    else:
        pred_w = lin_w = recon_w = np.ones(hp1)
    val_states = _stack_states(val, config.horizon_cap) if val else None

    def selection_loss(current_model):
        sel_states = val_states if val_states is not None else roll_states
        breakdown, _ = rollout_kernel(
            current_model, sel_states, pred_w, lin_w, recon_w, config.beta2
        )
        return breakdown

    best_total, best_params = np.inf, params.copy()
    for epoch in range(config.stage2_epochs):
        breakdown, grad = rollout_kernel(
            model, roll_states, pred_w, lin_w, recon_w, config.beta2, layout
        )
        breakdown.epoch, breakdown.split, breakdown.stage = epoch, "train", 2
        _check_finite(breakdown, 2, epoch)
        params = adam_step(params, grad, opt)
        model = model_from_flat(layout, params, enc_dims, dec_dims)
        history.append(breakdown)
        sel = selection_loss(model)
        sel.epoch, sel.stage = epoch, 2
        sel.split = "val" if val_states is not None else "train-select"
        history.append(sel)
        if sel.total < best_total:
            best_total, best_params = sel.total, params.copy()

    model = model_from_flat(layout, best_params, enc_dims, dec_dims)
    return model, history
