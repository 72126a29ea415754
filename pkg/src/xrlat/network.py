"""Segment-pooled encoder, label-wise attention, and per-label classifier.

All math is float64 numpy with hand-written backward passes so analytic
gradients can be validated coordinate-by-coordinate against central finite
differences. Each chunk of a document is encoded independently (positions
restart per chunk) by a miniature pre-layer-norm transformer with 0 to 2
blocks and a single attention head; the chunk encodings are concatenated
into the document representation H.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .losses import LossConfig, loss_and_grad
from .textproc import ChunkedDocument
from .util import DataError, NumericsError, derive_rng

LN_EPS = 1e-5
INIT_STD = 0.03  # linear-layer init: normal(0.0, 0.03)

_GELU_C = np.sqrt(2.0 / np.pi)


def _gelu_fwd(x):
    """tanh-approximation GELU; returns the tanh term for reuse in the backward pass."""
    x2 = x * x
    t = np.tanh(_GELU_C * (x + 0.044715 * x2 * x))
    return 0.5 * x * (1.0 + t), t


def _gelu(x):
    return _gelu_fwd(x)[0]


def _gelu_grad(x, t=None):
    x2 = x * x
    if t is None:
        t = np.tanh(_GELU_C * (x + 0.044715 * x2 * x))
    du = _GELU_C * (1.0 + 3.0 * 0.044715 * x2)
    return 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du


def _sigmoid(x):
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


@dataclass
class BlockParams:
    """One pre-layer-norm transformer block (single head, no biases on projections)."""

    q: np.ndarray
    k: np.ndarray
    v: np.ndarray
    o: np.ndarray
    ff1: np.ndarray
    ff2: np.ndarray
    ln1_g: np.ndarray
    ln1_b: np.ndarray
    ln2_g: np.ndarray
    ln2_b: np.ndarray

    FIELDS = ("q", "k", "v", "o", "ff1", "ff2", "ln1_g", "ln1_b", "ln2_g", "ln2_b")


@dataclass
class EncoderParams:
    """Token embeddings, learned per-chunk positions, and 0..2 transformer blocks."""

    emb: np.ndarray  # (vocab_size, h)
    pos: np.ndarray  # (c, h)
    blocks: list = field(default_factory=list)

    @property
    def hidden(self) -> int:
        return int(self.emb.shape[1])

    @property
    def vocab_size(self) -> int:
        return int(self.emb.shape[0])

    @property
    def chunk_len(self) -> int:
        return int(self.pos.shape[0])

    @property
    def n_layers(self) -> int:
        return len(self.blocks)


@dataclass
class HeadParams:
    """Label-attention queries W_la, per-label classifier rows W_cl, and bias b_cl."""

    W_la: np.ndarray  # (L, h)
    W_cl: np.ndarray  # (L, h)
    b_cl: np.ndarray  # (L,)

    @property
    def n_labels(self) -> int:
        return int(self.W_la.shape[0])


@dataclass
class CorrectionLayer:
    """Trainable affine map from label embeddings to attention-query space."""

    W: np.ndarray  # (d_emb, h)
    b: np.ndarray  # (h,)

    def apply(self, E: np.ndarray) -> np.ndarray:
        return E @ self.W + self.b

    @classmethod
    def zeros(cls, d_emb: int, h: int) -> "CorrectionLayer":
        return cls(np.zeros((d_emb, h)), np.zeros(h))


@dataclass
class DocumentRepresentation:
    """Per-token hidden states for a whole document, plus its padding flags."""

    H: np.ndarray  # (z, h)
    flags: np.ndarray  # (z,) uint8


def init_encoder(vocab_size: int, hidden: int, chunk_len: int, n_layers: int,
                 rng: np.random.Generator) -> EncoderParams:
    if n_layers not in (0, 1, 2):
        raise DataError(f"n_layers must be 0, 1 or 2, got {n_layers}")
    h = hidden
    emb = rng.normal(0.0, INIT_STD, size=(vocab_size, h))
    pos = rng.normal(0.0, INIT_STD, size=(chunk_len, h))
    blocks = []
    for _ in range(n_layers):
        blocks.append(
            BlockParams(
                q=rng.normal(0.0, INIT_STD, size=(h, h)),
                k=rng.normal(0.0, INIT_STD, size=(h, h)),
                v=rng.normal(0.0, INIT_STD, size=(h, h)),
                o=rng.normal(0.0, INIT_STD, size=(h, h)),
                ff1=rng.normal(0.0, INIT_STD, size=(h, 4 * h)),
                ff2=rng.normal(0.0, INIT_STD, size=(4 * h, h)),
                ln1_g=np.ones(h),
                ln1_b=np.zeros(h),
                ln2_g=np.ones(h),
                ln2_b=np.zeros(h),
            )
        )
    return EncoderParams(emb, pos, blocks)


def init_head(n_labels: int, hidden: int, rng: np.random.Generator) -> HeadParams:
    return HeadParams(
        W_la=rng.normal(0.0, INIT_STD, size=(n_labels, hidden)),
        W_cl=rng.normal(0.0, INIT_STD, size=(n_labels, hidden)),
        b_cl=np.zeros(n_labels),
    )


def encoder_tensors(enc: EncoderParams):
    yield "emb", enc.emb
    yield "pos", enc.pos
    for i, blk in enumerate(enc.blocks):
        for name in BlockParams.FIELDS:
            yield f"blk{i}.{name}", getattr(blk, name)


def head_tensors(head: HeadParams):
    yield "W_la", head.W_la
    yield "W_cl", head.W_cl
    yield "b_cl", head.b_cl


def zero_grads(enc: EncoderParams, head: HeadParams,
               corr: Optional[CorrectionLayer] = None) -> dict:
    grads = {name: np.zeros_like(t) for name, t in encoder_tensors(enc)}
    grads.update({name: np.zeros_like(t) for name, t in head_tensors(head)})
    if corr is not None:
        grads["corr.W"] = np.zeros_like(corr.W)
        grads["corr.b"] = np.zeros_like(corr.b)
    return grads


# ---------------------------------------------------------------------------
# layer norm


def _ln_fwd(x, g, b):
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = (xc**2).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + LN_EPS)
    xhat = xc * inv
    return g * xhat + b, (xhat, inv)


def _ln_bwd(dy, cache, g):
    xhat, inv = cache
    h = xhat.shape[-1]
    dg = (dy * xhat).sum(axis=tuple(range(dy.ndim - 1)))
    db = dy.sum(axis=tuple(range(dy.ndim - 1)))
    dxhat = dy * g
    m1 = dxhat.mean(axis=-1, keepdims=True)
    m2 = (dxhat * xhat).mean(axis=-1, keepdims=True)
    dx = inv * (dxhat - m1 - xhat * m2)
    return dx, dg, db


def _softmax_last(scores):
    shifted = scores - scores.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


def _dropout_mask(shape, p, rng):
    if p <= 0.0 or rng is None:
        return None
    return (rng.random(shape) >= p) / (1.0 - p)


# ---------------------------------------------------------------------------
# encoder


def _encode_fwd(doc: ChunkedDocument, enc: EncoderParams, dropout: float = 0.0,
                rng: Optional[np.random.Generator] = None):
    ids, flags = doc.chunks, doc.flags
    s, c = ids.shape
    if c > enc.chunk_len:
        raise DataError(f"chunk length {c} exceeds positional table size {enc.chunk_len}")
    if ids.min() < 0 or ids.max() >= enc.vocab_size:
        raise DataError("token id out of range for the embedding table")

    x = enc.emb[ids] + enc.pos[np.newaxis, :c, :]
    mask0 = _dropout_mask(x.shape, dropout, rng)
    if mask0 is not None:
        x = x * mask0

    # Padding keys get -inf scores so they cannot influence real tokens; chunks
    # that are entirely padding are left unmasked to keep the softmax defined.
    key_mask = np.where(flags == 0, -np.inf, 0.0)
    key_mask[flags.sum(axis=1) == 0, :] = 0.0
    key_mask = key_mask[:, np.newaxis, :]  # broadcast over query positions

    cache = {"ids": ids, "mask0": mask0, "blocks": []}
    scale = 1.0 / np.sqrt(enc.hidden)
    for blk in enc.blocks:
        a, ln1c = _ln_fwd(x, blk.ln1_g, blk.ln1_b)
        q = a @ blk.q
        k = a @ blk.k
        v = a @ blk.v
        scores = (q @ k.transpose(0, 2, 1)) * scale + key_mask
        p_attn = _softmax_last(scores)
        ctx = p_attn @ v
        out = ctx @ blk.o
        mask_a = _dropout_mask(out.shape, dropout, rng)
        if mask_a is not None:
            out = out * mask_a
        x1 = x + out
        b2, ln2c = _ln_fwd(x1, blk.ln2_g, blk.ln2_b)
        f1 = b2 @ blk.ff1
        g1, tanh1 = _gelu_fwd(f1)
        f2 = g1 @ blk.ff2
        x_next = x1 + f2
        cache["blocks"].append(
            {"x": x, "a": a, "q": q, "k": k, "v": v, "p": p_attn, "ctx": ctx,
             "ln1": ln1c, "ln2": ln2c, "x1": x1, "b2": b2, "f1": f1, "g1": g1,
             "tanh1": tanh1, "mask_a": mask_a}
        )
        x = x_next
    H = x.reshape(s * c, enc.hidden)
    cache["H"] = H
    return H, cache


def _flat_outer(a, b):
    """sum over (s, c) of outer products: (s, c, i) x (s, c, j) -> (i, j)."""
    return a.reshape(-1, a.shape[-1]).T @ b.reshape(-1, b.shape[-1])


def _encode_bwd(dH: np.ndarray, cache: dict, enc: EncoderParams, grads: dict) -> None:
    s, c = cache["ids"].shape
    dx = dH.reshape(s, c, enc.hidden)
    scale = 1.0 / np.sqrt(enc.hidden)
    for i in range(enc.n_layers - 1, -1, -1):
        blk, bc = enc.blocks[i], cache["blocks"][i]
        # feed-forward sublayer
        df2 = dx
        dx1 = dx.copy()
        grads[f"blk{i}.ff2"] += _flat_outer(bc["g1"], df2)
        dg1 = df2 @ blk.ff2.T
        df1 = dg1 * _gelu_grad(bc["f1"], bc["tanh1"])
        grads[f"blk{i}.ff1"] += _flat_outer(bc["b2"], df1)
        db2 = df1 @ blk.ff1.T
        dx_ln2, dg, db = _ln_bwd(db2, bc["ln2"], blk.ln2_g)
        grads[f"blk{i}.ln2_g"] += dg
        grads[f"blk{i}.ln2_b"] += db
        dx1 += dx_ln2
        # attention sublayer
        dout = dx1
        dx0 = dx1.copy()
        if bc["mask_a"] is not None:
            dout = dout * bc["mask_a"]
        grads[f"blk{i}.o"] += _flat_outer(bc["ctx"], dout)
        dctx = dout @ blk.o.T
        dp = dctx @ bc["v"].transpose(0, 2, 1)
        dv = bc["p"].transpose(0, 2, 1) @ dctx
        p_attn = bc["p"]
        dscores = p_attn * (dp - (dp * p_attn).sum(axis=-1, keepdims=True))
        dscores *= scale
        dq = dscores @ bc["k"]
        dk = dscores.transpose(0, 2, 1) @ bc["q"]
        grads[f"blk{i}.q"] += _flat_outer(bc["a"], dq)
        grads[f"blk{i}.k"] += _flat_outer(bc["a"], dk)
        grads[f"blk{i}.v"] += _flat_outer(bc["a"], dv)
        da = dq @ blk.q.T + dk @ blk.k.T + dv @ blk.v.T
        dx_ln1, dg, db = _ln_bwd(da, bc["ln1"], blk.ln1_g)
        grads[f"blk{i}.ln1_g"] += dg
        grads[f"blk{i}.ln1_b"] += db
        dx = dx0 + dx_ln1
    if cache["mask0"] is not None:
        dx = dx * cache["mask0"]
    np.add.at(grads["emb"], cache["ids"], dx)
    grads["pos"][:c] += dx.sum(axis=0)


def encode_document(doc: ChunkedDocument, params: EncoderParams) -> DocumentRepresentation:
    """Encode each chunk independently and concatenate to a z-by-h matrix.

    With zero transformer blocks the representation degenerates to
    ``emb[token] + pos[position-within-chunk]``.
    """
    H, _ = _encode_fwd(doc, params)
    return DocumentRepresentation(H, doc.flags.reshape(-1).copy())


# ---------------------------------------------------------------------------
# label attention + classifier


def _head_fwd(H, flags_flat, W_la_eff, W_cl, b_cl):
    real = np.flatnonzero(flags_flat)
    if real.size == 0:
        raise DataError("cannot attend over a document whose tokens are all padding")
    Hr = H[real]  # (r, h)
    scores = W_la_eff @ Hr.T  # (A, r)
    alpha = _softmax_last(scores)
    d = alpha @ Hr  # (A, h)
    logits = (d * W_cl).sum(axis=1) + b_cl
    p = _sigmoid(logits)
    return p, {"real": real, "Hr": Hr, "alpha": alpha, "d": d, "logits": logits,
               "scores": scores, "p": p}


def _head_bwd(dp, hc, W_la_eff, W_cl):
    p, d, alpha, Hr = hc["p"], hc["d"], hc["alpha"], hc["Hr"]
    dlogits = dp * p * (1.0 - p)
    dW_cl = dlogits[:, np.newaxis] * d
    db_cl = dlogits
    dd = dlogits[:, np.newaxis] * W_cl
    dalpha = dd @ Hr.T
    dHr = alpha.T @ dd
    dscores = alpha * (dalpha - (dalpha * alpha).sum(axis=-1, keepdims=True))
    dW_la = dscores @ Hr
    dHr += dscores.T @ W_la_eff
    return dW_la, dW_cl, db_cl, dHr


def label_attention(rep: DocumentRepresentation, W_la: np.ndarray,
                    return_alpha: bool = False):
    """Label-specific document vectors d_j = sum_t alpha_jt h_t over real tokens.

    Attention scores are dot products of each label's query row with the token
    states; padding tokens receive exactly zero attention.
    """
    real = np.flatnonzero(rep.flags)
    if real.size == 0:
        raise DataError("cannot attend over a document whose tokens are all padding")
    Hr = rep.H[real]
    alpha_r = _softmax_last(W_la @ Hr.T)
    d = alpha_r @ Hr
    if not return_alpha:
        return d
    alpha = np.zeros((W_la.shape[0], rep.H.shape[0]))
    alpha[:, real] = alpha_r
    return d, alpha


def classify(d: np.ndarray, W_cl: np.ndarray, b_cl: np.ndarray,
             mask: Optional[np.ndarray] = None) -> np.ndarray:
    """Per-label probabilities sigmoid(d_j . W_cl[j] + b_cl[j]); masked labels score 0."""
    if d.shape != W_cl.shape:
        raise DataError(f"shape mismatch: d {d.shape} vs W_cl {W_cl.shape}")
    p = _sigmoid((d * W_cl).sum(axis=1) + b_cl)
    if mask is not None:
        p = np.where(np.asarray(mask).astype(bool), p, 0.0)
    return p


def _effective_w_la(head: HeadParams, corr: Optional[CorrectionLayer],
                    corr_inputs: Optional[np.ndarray], active: np.ndarray):
    base = head.W_la[active]
    if corr is None:
        return base, None
    E_act = corr_inputs[active]
    return base + E_act @ corr.W + corr.b, E_act


def forward_probs(doc: ChunkedDocument, enc: EncoderParams, head: HeadParams,
                  mask: Optional[np.ndarray] = None,
                  corr: Optional[CorrectionLayer] = None,
                  corr_inputs: Optional[np.ndarray] = None) -> np.ndarray:
    """Evaluation-mode forward pass; masked labels are skipped and score 0."""
    L = head.n_labels
    active = np.arange(L) if mask is None else np.flatnonzero(np.asarray(mask))
    probs = np.zeros(L)
    if active.size == 0:
        return probs
    H, _ = _encode_fwd(doc, enc)
    W_eff, _ = _effective_w_la(head, corr, corr_inputs, active)
    p, _ = _head_fwd(H, doc.flags.reshape(-1), W_eff, head.W_cl[active], head.b_cl[active])
    probs[active] = p
    return probs


def forward_backward(doc: ChunkedDocument, params: EncoderParams, head: HeadParams,
                     gold: np.ndarray, mask: Optional[np.ndarray],
                     loss_cfg: LossConfig, corr: Optional[CorrectionLayer] = None,
                     corr_inputs: Optional[np.ndarray] = None,
                     dropout: float = 0.0,
                     rng: Optional[np.random.Generator] = None):
    """Loss and exact gradients for one document.

    Masked labels are skipped entirely: they contribute no loss and their
    W_la/W_cl/b_cl gradient rows are exactly zero. Returns (loss, grads) with
    one gradient array per trainable tensor.
    """
    L = head.n_labels
    active = np.arange(L) if mask is None else np.flatnonzero(np.asarray(mask))
    if active.size == 0:
        raise DataError("no unmasked labels to compute a loss over")
    gold = np.asarray(gold)

    H, enc_cache = _encode_fwd(doc, params, dropout=dropout, rng=rng)
    W_eff, E_act = _effective_w_la(head, corr, corr_inputs, active)
    W_cl_act, b_cl_act = head.W_cl[active], head.b_cl[active]
    p, hc = _head_fwd(H, doc.flags.reshape(-1), W_eff, W_cl_act, b_cl_act)
    loss, dp = loss_and_grad(p, gold[active], loss_cfg)

    if not np.isfinite(loss):
        for name, t in (("H", H), ("attention_scores", hc["scores"]),
                        ("label_vectors", hc["d"]), ("logits", hc["logits"]),
                        ("probabilities", p)):
            if not np.all(np.isfinite(t)):
                raise NumericsError(f"non-finite values in {name}", tensor=name)
        raise NumericsError("non-finite loss", tensor="loss")

    grads = zero_grads(params, head, corr)
    dW_la_act, dW_cl_act, db_cl_act, dHr = _head_bwd(dp, hc, W_eff, W_cl_act)
    grads["W_la"][active] = dW_la_act
    grads["W_cl"][active] = dW_cl_act
    grads["b_cl"][active] = db_cl_act
    if corr is not None:
        grads["corr.W"] += E_act.T @ dW_la_act
        grads["corr.b"] += dW_la_act.sum(axis=0)
    dH = np.zeros_like(H)
    dH[hc["real"]] = dHr
    _encode_bwd(dH, enc_cache, params, grads)
    return loss, grads


# ---------------------------------------------------------------------------
# gradient checking


@dataclass
class GradcheckConfig:
    n_layers: int = 1
    hidden: int = 8
    vocab_size: int = 50
    c: int = 8
    s: int = 2
    n_labels: int = 20
    loss: LossConfig = field(default_factory=LossConfig)
    with_correction: bool = False
    d_emb: int = 5
    epsilon: float = 1e-4
    max_coords: Optional[int] = None  # None = every coordinate
    corrupt_tensor: Optional[str] = None  # test hook: provably breaks the check


@dataclass
class GradcheckReport:
    max_rel_err: float
    worst_tensor: str
    per_tensor: dict  # name -> (coord, analytic, numeric, rel_err)

    def ok(self, tol: float = 1e-4) -> bool:
        return self.max_rel_err < tol

    def to_text(self) -> str:
        lines = ["tensor\tworst_coord\tanalytic\tnumeric\trel_err"]
        for name, (coord, a, n, r) in self.per_tensor.items():
            lines.append(f"{name}\t{coord}\t{a:.6e}\t{n:.6e}\t{r:.3e}")
        lines.append(
            f"max relative error: {self.max_rel_err:.6e} (tensor {self.worst_tensor})"
        )
        return "\n".join(lines) + "\n"


def gradcheck(config: GradcheckConfig, seed: int = 0) -> GradcheckReport:
    """Compare analytic gradients against central finite differences.

    Checks every parameter coordinate (or a seeded random subsample of at
    least max_coords of them). Relative error uses a denominator floor of
    1e-4: central differences at epsilon=1e-4 carry O(1e-9) truncation error,
    so coordinates whose true gradient sits below the floor are effectively
    held to an absolute tolerance of 1e-8 instead of a meaningless ratio of
    two noise-dominated numbers.
    """
    rng = derive_rng(seed, "gradcheck")
    enc = init_encoder(config.vocab_size, config.hidden, config.c, config.n_layers, rng)
    head = init_head(config.n_labels, config.hidden, rng)
    corr = None
    corr_inputs = None
    if config.with_correction:
        corr = CorrectionLayer(
            rng.normal(0.0, INIT_STD, size=(config.d_emb, config.hidden)),
            rng.normal(0.0, INIT_STD, size=config.hidden),
        )
        corr_inputs = rng.normal(0.0, 0.1, size=(config.n_labels, config.d_emb))

    z = config.c * config.s
    t = max(1, z - 3)  # leave some padding so the flag path is exercised
    ids = rng.integers(2, config.vocab_size, size=t)
    from .textproc import chunk as make_chunks

    doc = make_chunks(ids, config.c, config.s)
    gold = (rng.random(config.n_labels) < 0.3).astype(np.float64)

    _, grads = forward_backward(doc, enc, head, gold, None, config.loss,
                                corr=corr, corr_inputs=corr_inputs)
    if config.corrupt_tensor is not None:
        grads[config.corrupt_tensor].flat[0] += 1.0

    def loss_only():
        H, _ = _encode_fwd(doc, enc)
        active = np.arange(config.n_labels)
        W_eff, _ = _effective_w_la(head, corr, corr_inputs, active)
        p, _ = _head_fwd(H, doc.flags.reshape(-1), W_eff, head.W_cl, head.b_cl)
        loss, _ = loss_and_grad(p, gold, config.loss)
        return loss

    tensors = dict(encoder_tensors(enc))
    tensors.update(dict(head_tensors(head)))
    if corr is not None:
        tensors["corr.W"] = corr.W
        tensors["corr.b"] = corr.b

    n_total = sum(t.size for t in tensors.values())
    if config.max_coords is not None and config.max_coords < n_total:
        budget = max(config.max_coords, 500)
        pick = np.sort(rng.choice(n_total, size=min(budget, n_total), replace=False))
        picked = set(int(i) for i in pick)
    else:
        picked = None

    eps = config.epsilon
    per_tensor = {}
    max_rel, worst = 0.0, ""
    offset = 0
    for name, tensor in tensors.items():
        flat = tensor.reshape(-1)
        best = (0, 0.0, 0.0, 0.0)
        for i in range(flat.size):
            if picked is not None and (offset + i) not in picked:
                continue
            orig = flat[i]
            flat[i] = orig + eps
            lp = loss_only()
            flat[i] = orig - eps
            lm = loss_only()
            flat[i] = orig
            numeric = (lp - lm) / (2.0 * eps)
            analytic = grads[name].reshape(-1)[i]
            rel = abs(analytic - numeric) / max(abs(analytic), abs(numeric), 1e-4)
            if rel > best[3]:
                best = (i, analytic, numeric, rel)
        offset += flat.size
        coord = np.unravel_index(best[0], tensor.shape)
        per_tensor[name] = (tuple(int(c) for c in coord), best[1], best[2], best[3])
        if best[3] >= max_rel:
            max_rel, worst = best[3], name
    return GradcheckReport(max_rel, worst, per_tensor)
