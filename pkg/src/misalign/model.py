"""The misalignment regression model and its hand-written gradients.

Architecture, per registered pair: each anchor's 5S+3 feature vector is
fused across scales by multihead tempered attention into an 8-dim token;
one local vector-attention block mixes tokens across neighboring anchors
and mean-pools them into a 32-dim pair embedding; a three-layer ReLU head
with a softplus output maps that to a nonnegative predicted alignment
error. Forward and backward are plain numpy; gradients are exact
reverse-mode and are checked coordinate-wise against finite differences.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import cKDTree

from .features import AnchorFeatureVector, ScaleConfig

N_HEADS = 4
HEAD_DIM = 2
TOKEN_DIM = 8
ENC_DIM = 32
HEAD_HIDDEN = (32, 16)
LN_EPS = 1e-8


@dataclass
class AttentionParams:
    """Query MLP, per-head projections, output projection, normalization."""

    q_w1: np.ndarray
    q_b1: np.ndarray
    q_w2: np.ndarray
    q_b2: np.ndarray
    head_q: np.ndarray  # (heads, head_dim, token_dim)
    head_k: np.ndarray
    head_v: np.ndarray
    w_o: np.ndarray
    ln_gain: np.ndarray
    ln_bias: np.ndarray


@dataclass
class EncoderParams:
    """One local vector-attention block over anchor tokens."""

    q_proj: np.ndarray
    q_bias: np.ndarray
    k_proj: np.ndarray
    k_bias: np.ndarray
    v_proj: np.ndarray
    v_bias: np.ndarray
    pos_w1: np.ndarray
    pos_b1: np.ndarray
    pos_w2: np.ndarray
    pos_b2: np.ndarray
    att_w1: np.ndarray
    att_b1: np.ndarray
    att_w2: np.ndarray
    att_b2: np.ndarray


@dataclass
class HeadParams:
    """Three affine layers with ReLU between them; softplus applied outside."""

    w1: np.ndarray
    b1: np.ndarray
    w2: np.ndarray
    b2: np.ndarray
    w3: np.ndarray
    b3: np.ndarray


_ATTENTION_FIELDS = (
    "q_w1", "q_b1", "q_w2", "q_b2",
    "head_q", "head_k", "head_v",
    "w_o", "ln_gain", "ln_bias",
)
_ENCODER_FIELDS = (
    "q_proj", "q_bias", "k_proj", "k_bias", "v_proj", "v_bias",
    "pos_w1", "pos_b1", "pos_w2", "pos_b2",
    "att_w1", "att_b1", "att_w2", "att_b2",
)
_HEAD_FIELDS = ("w1", "b1", "w2", "b2", "w3", "b3")
_LAYOUT = (
    [("attention", f) for f in _ATTENTION_FIELDS]
    + [("encoder", f) for f in _ENCODER_FIELDS]
    + [("head", f) for f in _HEAD_FIELDS]
)


@dataclass
class ModelParams:
    """All learnable tensors plus the fixed hyperparameters they assume.

    `tau` is the attention temperature (fixed, never trained).
    `attention_mode` is "tempered" for the softmax fusion or "uniform" for
    the averaging variant that replaces attention weights with 1/S.
    `pos_scale` divides coordinate differences inside the encoder so its
    position MLP sees O(1) inputs regardless of scene size.
    """

    attention: AttentionParams
    encoder: EncoderParams
    head: HeadParams
    n_scales: int
    tau: float = 0.6
    attention_mode: str = "tempered"
    k_neighbors: int = 16
    pos_scale: float = 7.5

    def __post_init__(self):
        if self.tau <= 0:
            raise ValueError("temperature must be positive")
        if self.attention_mode not in ("tempered", "uniform"):
            raise ValueError(f"unknown attention mode {self.attention_mode!r}")

    @property
    def feature_dim(self) -> int:
        return 5 * self.n_scales + 3

    def manifest(self) -> list[tuple[str, tuple[int, ...]]]:
        """Stable (name, shape) listing defining the flat parameter order."""
        return [
            (f"{group}.{name}", getattr(getattr(self, group), name).shape)
            for group, name in _LAYOUT
        ]

    def flatten(self) -> np.ndarray:
        return np.concatenate(
            [getattr(getattr(self, group), name).ravel() for group, name in _LAYOUT]
        )

    def with_flat(self, flat: np.ndarray) -> "ModelParams":
        """A new ModelParams with tensors read back from a flat vector."""
        flat = np.asarray(flat, dtype=np.float64)
        if flat.shape != (self.n_parameters,):
            raise ValueError("flat vector length mismatch")
        groups = {"attention": {}, "encoder": {}, "head": {}}
        offset = 0
        for group, name in _LAYOUT:
            shape = getattr(getattr(self, group), name).shape
            size = int(np.prod(shape))
            groups[group][name] = flat[offset : offset + size].reshape(shape).copy()
            offset += size
        return ModelParams(
            AttentionParams(**groups["attention"]),
            EncoderParams(**groups["encoder"]),
            HeadParams(**groups["head"]),
            n_scales=self.n_scales,
            tau=self.tau,
            attention_mode=self.attention_mode,
            k_neighbors=self.k_neighbors,
            pos_scale=self.pos_scale,
        )

    @property
    def n_parameters(self) -> int:
        return sum(getattr(getattr(self, group), name).size for group, name in _LAYOUT)


def attention_core_parameter_count(n_scales: int) -> int:
    """Parameters of the query MLP, head projections, and output projection.

    (5S+3)*16+16 + 16*8+8 for the query MLP, 12 head matrices of
    head_dim x token_dim, plus the 8x8 output projection; the normalization
    affine (16 more) is counted separately.
    """
    feature_dim = 5 * n_scales + 3
    query_mlp = (feature_dim * 16 + 16) + (16 * TOKEN_DIM + TOKEN_DIM)
    heads = 3 * N_HEADS * HEAD_DIM * TOKEN_DIM
    return query_mlp + heads + TOKEN_DIM * TOKEN_DIM


def init_params(
    seed: int,
    n_scales: int = 3,
    tau: float = 0.6,
    attention_mode: str = "tempered",
    k_neighbors: int = 16,
    pos_scale: float = 7.5,
) -> ModelParams:
    """Seeded initialization: uniform +-1/sqrt(fan_in) per tensor.

    Normalization gain starts at 1 and bias at 0.
    """
    rng = np.random.default_rng(np.random.SeedSequence((int(seed), 3)))
    feature_dim = 5 * n_scales + 3

    def uniform(shape, fan_in):
        bound = 1.0 / np.sqrt(fan_in)
        return rng.uniform(-bound, bound, size=shape)

    attention = AttentionParams(
        q_w1=uniform((16, feature_dim), feature_dim),
        q_b1=uniform((16,), feature_dim),
        q_w2=uniform((TOKEN_DIM, 16), 16),
        q_b2=uniform((TOKEN_DIM,), 16),
        head_q=uniform((N_HEADS, HEAD_DIM, TOKEN_DIM), TOKEN_DIM),
        head_k=uniform((N_HEADS, HEAD_DIM, TOKEN_DIM), TOKEN_DIM),
        head_v=uniform((N_HEADS, HEAD_DIM, TOKEN_DIM), TOKEN_DIM),
        w_o=uniform((TOKEN_DIM, TOKEN_DIM), TOKEN_DIM),
        ln_gain=np.ones(TOKEN_DIM),
        ln_bias=np.zeros(TOKEN_DIM),
    )
    encoder = EncoderParams(
        q_proj=uniform((ENC_DIM, TOKEN_DIM), TOKEN_DIM),
        q_bias=uniform((ENC_DIM,), TOKEN_DIM),
        k_proj=uniform((ENC_DIM, TOKEN_DIM), TOKEN_DIM),
        k_bias=uniform((ENC_DIM,), TOKEN_DIM),
        v_proj=uniform((ENC_DIM, TOKEN_DIM), TOKEN_DIM),
        v_bias=uniform((ENC_DIM,), TOKEN_DIM),
        pos_w1=uniform((ENC_DIM, 3), 3),
        pos_b1=uniform((ENC_DIM,), 3),
        pos_w2=uniform((ENC_DIM, ENC_DIM), ENC_DIM),
        pos_b2=uniform((ENC_DIM,), ENC_DIM),
        att_w1=uniform((ENC_DIM, ENC_DIM), ENC_DIM),
        att_b1=uniform((ENC_DIM,), ENC_DIM),
        att_w2=uniform((ENC_DIM, ENC_DIM), ENC_DIM),
        att_b2=uniform((ENC_DIM,), ENC_DIM),
    )
    head = HeadParams(
        w1=uniform((HEAD_HIDDEN[0], ENC_DIM), ENC_DIM),
        b1=uniform((HEAD_HIDDEN[0],), ENC_DIM),
        w2=uniform((HEAD_HIDDEN[1], HEAD_HIDDEN[0]), HEAD_HIDDEN[0]),
        b2=uniform((HEAD_HIDDEN[1],), HEAD_HIDDEN[0]),
        w3=uniform((1, HEAD_HIDDEN[1]), HEAD_HIDDEN[1]),
        b3=uniform((1,), HEAD_HIDDEN[1]),
    )
    return ModelParams(
        attention, encoder, head,
        n_scales=n_scales, tau=tau, attention_mode=attention_mode,
        k_neighbors=k_neighbors, pos_scale=pos_scale,
    )


def split_scales(f, n_scales: int | None = None) -> np.ndarray:
    """Splits a feature vector into its S per-scale key/value blocks.

    Block s is [H_joint, H_sep, D_lambda, rho_joint, rho_sep, c, d, b]: the
    five features of scale s followed by the three globals, identical across
    blocks.

    Returns:
        (S, 8) array.
    """
    if isinstance(f, AnchorFeatureVector):
        vec = f.vector
    else:
        vec = np.asarray(f, dtype=np.float64)
    if n_scales is None:
        if (vec.shape[0] - 3) % 5:
            raise ValueError("feature vector length must be 5*S + 3")
        n_scales = (vec.shape[0] - 3) // 5
    if vec.shape[0] != 5 * n_scales + 3:
        raise ValueError("feature vector length must be 5*S + 3")
    blocks = vec[: 5 * n_scales].reshape(n_scales, 5)
    globals_ = np.broadcast_to(vec[5 * n_scales :], (n_scales, 3))
    return np.concatenate([blocks, globals_], axis=1)


def _scale_blocks_batch(F: np.ndarray, n_scales: int) -> np.ndarray:
    """(n, D) feature rows -> (n, S, 8) key/value blocks."""
    n = F.shape[0]
    blocks = F[:, : 5 * n_scales].reshape(n, n_scales, 5)
    globals_ = np.broadcast_to(F[:, 5 * n_scales :][:, None, :], (n, n_scales, 3))
    return np.concatenate([blocks, globals_], axis=2)


def _softmax(x: np.ndarray, axis: int) -> np.ndarray:
    shifted = x - x.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=axis, keepdims=True)


def _attention_forward(F: np.ndarray, params: ModelParams) -> dict:
    at = params.attention
    n = F.shape[0]
    S = params.n_scales
    K = _scale_blocks_batch(F, S)
    h1_pre = F @ at.q_w1.T + at.q_b1
    h1 = np.maximum(h1_pre, 0.0)
    q = h1 @ at.q_w2.T + at.q_b2
    hq = np.einsum("hdq,nq->nhd", at.head_q, q)
    hk = np.einsum("hdq,nsq->nshd", at.head_k, K)
    hv = np.einsum("hdq,nsq->nshd", at.head_v, K)
    scale = 1.0 / (np.sqrt(2.0) * params.tau)
    logits = np.einsum("nhd,nshd->nhs", hq, hk) * scale
    if params.attention_mode == "uniform":
        alpha = np.full((n, N_HEADS, S), 1.0 / S)
    else:
        alpha = _softmax(logits, axis=2)
    v_tilde = np.einsum("nhs,nshd->nhd", alpha, hv)
    v_flat = v_tilde.reshape(n, N_HEADS * HEAD_DIM)
    z = v_flat @ at.w_o.T
    mu = z.mean(axis=1, keepdims=True)
    var = z.var(axis=1, keepdims=True)
    inv_std = 1.0 / np.sqrt(var + LN_EPS)
    xhat = (z - mu) * inv_std
    tokens = at.ln_gain * xhat + at.ln_bias
    return {
        "F": F, "K": K, "h1": h1, "q": q, "hq": hq, "hk": hk, "hv": hv,
        "scale": scale, "alpha": alpha, "v_flat": v_flat,
        "inv_std": inv_std, "xhat": xhat, "tokens": tokens,
    }


def scale_attention(f, params: ModelParams, return_alpha: bool = False):
    """Fuses one anchor's per-scale blocks into an 8-dim token.

    Args:
        f: AnchorFeatureVector or flat (5S+3,) vector.
        params: model parameters (only the attention group is used).
        return_alpha: also return the (heads, S) attention weights.
    """
    vec = f.vector if isinstance(f, AnchorFeatureVector) else np.asarray(f, dtype=np.float64)
    cache = _attention_forward(vec[None, :], params)
    token = cache["tokens"][0]
    if return_alpha:
        return token, cache["alpha"][0]
    return token


def neighbor_indices(positions: np.ndarray, k: int) -> np.ndarray:
    """Indices of the k nearest anchors (self included) for each anchor."""
    P = np.asarray(positions, dtype=np.float64)
    k_eff = min(k, P.shape[0])
    _, nbr = cKDTree(P).query(P, k=k_eff)
    if k_eff == 1:
        nbr = nbr[:, None]
    return np.asarray(nbr, dtype=np.intp)


def _encoder_forward(tokens: np.ndarray, P: np.ndarray, nbr: np.ndarray, params: ModelParams) -> dict:
    en = params.encoder
    Q = tokens @ en.q_proj.T + en.q_bias
    Kp = tokens @ en.k_proj.T + en.k_bias
    V = tokens @ en.v_proj.T + en.v_bias
    Kn = Kp[nbr]
    Vn = V[nbr]
    diffs = (P[:, None, :] - P[nbr]) / params.pos_scale
    ph_pre = diffs @ en.pos_w1.T + en.pos_b1
    ph = np.maximum(ph_pre, 0.0)
    delta = ph @ en.pos_w2.T + en.pos_b2
    e = Q[:, None, :] - Kn + delta
    g_pre = e @ en.att_w1.T + en.att_b1
    g = np.maximum(g_pre, 0.0)
    logits = g @ en.att_w2.T + en.att_b2
    a = _softmax(logits, axis=1)
    y = (a * (Vn + delta)).sum(axis=1)
    pooled = y.mean(axis=0)
    return {
        "tokens": tokens, "nbr": nbr, "diffs": diffs, "ph": ph, "delta": delta,
        "e": e, "g": g, "a": a, "Vn": Vn, "pooled": pooled,
    }


def _head_forward(pooled: np.ndarray, params: ModelParams) -> dict:
    hd = params.head
    h1 = np.maximum(hd.w1 @ pooled + hd.b1, 0.0)
    h2 = np.maximum(hd.w2 @ h1 + hd.b2, 0.0)
    z = float((hd.w3 @ h2 + hd.b3)[0])
    pred = float(np.logaddexp(0.0, z))  # softplus
    return {"pooled": pooled, "h1": h1, "h2": h2, "z": z, "pred": pred}


def forward(
    features: np.ndarray,
    positions: np.ndarray,
    params: ModelParams,
    neighbors: np.ndarray | None = None,
    cache: dict | None = None,
) -> float:
    """Predicted alignment error for one pair's anchor set, >= 0.

    Args:
        features: (n, 5S+3) standardized anchor features, n >= 2.
        positions: (n, 3) anchor positions in the common frame.
        params: model parameters.
        neighbors: optional precomputed (n, k) neighbor indices.
        cache: optional dict; filled with intermediates for `backward`.
    """
    F = np.asarray(features, dtype=np.float64)
    P = np.asarray(positions, dtype=np.float64)
    if F.ndim != 2 or F.shape[0] < 2:
        raise ValueError("need at least 2 anchors")
    if F.shape[1] != params.feature_dim:
        raise ValueError(f"feature dim {F.shape[1]} != expected {params.feature_dim}")
    if neighbors is None:
        neighbors = neighbor_indices(P, params.k_neighbors)
    att = _attention_forward(F, params)
    enc = _encoder_forward(att["tokens"], P, neighbors, params)
    hd = _head_forward(enc["pooled"], params)
    if cache is not None:
        cache["att"], cache["enc"], cache["hd"] = att, enc, hd
    return hd["pred"]


def loss(pred: float, label: float) -> float:
    """Squared error."""
    return float((pred - label) ** 2)


def backward(cache: dict, params: ModelParams, d_pred: float) -> np.ndarray:
    """Gradient of d_pred * pred w.r.t. every parameter, as a flat vector.

    `cache` must come from a `forward` call with the same params. For the
    squared-error loss pass d_pred = 2 * (pred - label).
    """
    at, en, hd = params.attention, params.encoder, params.head
    att, enc, head_c = cache["att"], cache["enc"], cache["hd"]
    grads: dict[str, np.ndarray] = {}

    # head (softplus then three affine layers)
    dz = d_pred / (1.0 + np.exp(-head_c["z"]))
    h1, h2, pooled = head_c["h1"], head_c["h2"], head_c["pooled"]
    grads["head.w3"] = dz * h2[None, :]
    grads["head.b3"] = np.array([dz])
    dh2 = dz * hd.w3[0]
    dh2 = dh2 * (h2 > 0)
    grads["head.w2"] = np.outer(dh2, h1)
    grads["head.b2"] = dh2
    dh1 = hd.w2.T @ dh2
    dh1 = dh1 * (h1 > 0)
    grads["head.w1"] = np.outer(dh1, pooled)
    grads["head.b1"] = dh1
    d_pooled = hd.w1.T @ dh1

    # encoder: mean pool, neighbor softmax, value/position branches
    tokens, nbr = enc["tokens"], enc["nbr"]
    n = tokens.shape[0]
    a, Vn, delta = enc["a"], enc["Vn"], enc["delta"]
    dy = np.broadcast_to(d_pooled / n, (n, d_pooled.shape[0]))
    da = dy[:, None, :] * (Vn + delta)
    dVn_plus_delta = a * dy[:, None, :]
    dlogits = a * (da - (a * da).sum(axis=1, keepdims=True))
    g, e, ph, diffs = enc["g"], enc["e"], enc["ph"], enc["diffs"]
    grads["encoder.att_w2"] = np.einsum("nkc,nkh->ch", dlogits, g)
    grads["encoder.att_b2"] = dlogits.sum(axis=(0, 1))
    dg = dlogits @ en.att_w2
    dg = dg * (g > 0)
    grads["encoder.att_w1"] = np.einsum("nkh,nkc->hc", dg, e)
    grads["encoder.att_b1"] = dg.sum(axis=(0, 1))
    de = dg @ en.att_w1
    dQ = de.sum(axis=1)
    dKn = -de
    ddelta = de + dVn_plus_delta
    dVn = dVn_plus_delta
    grads["encoder.pos_w2"] = np.einsum("nkc,nkh->ch", ddelta, ph)
    grads["encoder.pos_b2"] = ddelta.sum(axis=(0, 1))
    dph = ddelta @ en.pos_w2
    dph = dph * (ph > 0)
    grads["encoder.pos_w1"] = np.einsum("nkh,nkd->hd", dph, diffs)
    grads["encoder.pos_b1"] = dph.sum(axis=(0, 1))
    dKp = np.zeros((n, ENC_DIM))
    np.add.at(dKp, nbr, dKn)
    dV = np.zeros((n, ENC_DIM))
    np.add.at(dV, nbr, dVn)
    grads["encoder.q_proj"] = dQ.T @ tokens
    grads["encoder.q_bias"] = dQ.sum(axis=0)
    grads["encoder.k_proj"] = dKp.T @ tokens
    grads["encoder.k_bias"] = dKp.sum(axis=0)
    grads["encoder.v_proj"] = dV.T @ tokens
    grads["encoder.v_bias"] = dV.sum(axis=0)
    d_tokens = dQ @ en.q_proj + dKp @ en.k_proj + dV @ en.v_proj

    # attention: layer norm, output projection, per-head mix, query MLP
    xhat, inv_std = att["xhat"], att["inv_std"]
    grads["attention.ln_gain"] = (d_tokens * xhat).sum(axis=0)
    grads["attention.ln_bias"] = d_tokens.sum(axis=0)
    dxhat = d_tokens * at.ln_gain
    m = xhat.shape[1]
    dzn = inv_std * (
        dxhat
        - dxhat.mean(axis=1, keepdims=True)
        - xhat * (dxhat * xhat).sum(axis=1, keepdims=True) / m
    )
    v_flat = att["v_flat"]
    grads["attention.w_o"] = dzn.T @ v_flat
    dv_flat = dzn @ at.w_o
    dv = dv_flat.reshape(n, N_HEADS, HEAD_DIM)
    alpha, hv, hk, hq, q, K = att["alpha"], att["hv"], att["hk"], att["hq"], att["q"], att["K"]
    dalpha = np.einsum("nhd,nshd->nhs", dv, hv)
    dhv = np.einsum("nhs,nhd->nshd", alpha, dv)
    if params.attention_mode == "uniform":
        dlogits_a = np.zeros_like(alpha)
    else:
        dlogits_a = alpha * (dalpha - (alpha * dalpha).sum(axis=2, keepdims=True))
    scale = att["scale"]
    dhq = np.einsum("nhs,nshd->nhd", dlogits_a, hk) * scale
    dhk = np.einsum("nhs,nhd->nshd", dlogits_a, hq) * scale
    grads["attention.head_q"] = np.einsum("nhd,nq->hdq", dhq, q)
    grads["attention.head_k"] = np.einsum("nshd,nsq->hdq", dhk, K)
    grads["attention.head_v"] = np.einsum("nshd,nsq->hdq", dhv, K)
    dq_vec = np.einsum("nhd,hdq->nq", dhq, at.head_q)
    F, h1a = att["F"], att["h1"]
    grads["attention.q_w2"] = dq_vec.T @ h1a
    grads["attention.q_b2"] = dq_vec.sum(axis=0)
    dh1a = dq_vec @ at.q_w2
    dh1a = dh1a * (h1a > 0)
    grads["attention.q_w1"] = dh1a.T @ F
    grads["attention.q_b1"] = dh1a.sum(axis=0)

    return np.concatenate([grads[f"{g}.{f}"].ravel() for g, f in _LAYOUT])


def loss_gradient(
    features: np.ndarray,
    positions: np.ndarray,
    label: float,
    params: ModelParams,
    neighbors: np.ndarray | None = None,
) -> tuple[float, np.ndarray]:
    """Squared-error loss and its flat parameter gradient for one pair."""
    cache: dict = {}
    pred = forward(features, positions, params, neighbors=neighbors, cache=cache)
    grad = backward(cache, params, 2.0 * (pred - label))
    return loss(pred, label), grad


def save_checkpoint(
    path,
    params: ModelParams,
    scale_config: ScaleConfig,
    feature_mean: np.ndarray,
    feature_std: np.ndarray,
    n_anchors: int,
    metadata: dict | None = None,
) -> None:
    """Writes a JSON checkpoint; floats use repr so the round trip is exact."""
    payload = {
        "version": 1,
        "manifest": [[name, list(shape)] for name, shape in params.manifest()],
        "flat": params.flatten().tolist(),
        "n_scales": params.n_scales,
        "tau": params.tau,
        "attention_mode": params.attention_mode,
        "k_neighbors": params.k_neighbors,
        "pos_scale": params.pos_scale,
        "scale_config": scale_config.to_dict(),
        "feature_mean": np.asarray(feature_mean, dtype=np.float64).tolist(),
        "feature_std": np.asarray(feature_std, dtype=np.float64).tolist(),
        "n_anchors": int(n_anchors),
        "metadata": metadata or {},
    }
    with open(path, "w") as fh:
        json.dump(payload, fh, sort_keys=True)


def load_checkpoint(path) -> dict:
    """Reads a checkpoint into a dict with a rebuilt ModelParams under "params"."""
    with open(path) as fh:
        payload = json.load(fh)
    if payload.get("version") != 1:
        raise ValueError("unsupported checkpoint version")
    template = init_params(
        0,
        n_scales=payload["n_scales"],
        tau=payload["tau"],
        attention_mode=payload["attention_mode"],
        k_neighbors=payload["k_neighbors"],
        pos_scale=payload["pos_scale"],
    )
    expected = [[name, list(shape)] for name, shape in template.manifest()]
    if payload["manifest"] != expected:
        raise ValueError("checkpoint manifest does not match this model layout")
    params = template.with_flat(np.asarray(payload["flat"], dtype=np.float64))
    return {
        "params": params,
        "scale_config": ScaleConfig.from_dict(payload["scale_config"]),
        "feature_mean": np.asarray(payload["feature_mean"], dtype=np.float64),
        "feature_std": np.asarray(payload["feature_std"], dtype=np.float64),
        "n_anchors": payload["n_anchors"],
        "metadata": payload["metadata"],
    }
