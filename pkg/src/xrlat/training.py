"""Losses, optimizer, bootstrapping, dynamic negative sampling, and training loops.

Two regimes are provided: a flat code-level classifier trained over the full
label set, and a waterfall chain of four sub-models (chapter, block,
category, code) where each child level can be initialized from its trained
parent (bootstrapping) and restricted per instance to children of parents
that are gold or predicted positive (dynamic negative sampling).
"""

from __future__ import annotations

import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .code_tree import CodeTree, IndexingMatrix, LabelMatrix, propagate_labels
from .hyperbolic import PoincareEmbeddings
from .losses import LossConfig, asl_loss, bce_loss  # re-exported API  # noqa: F401
from .network import (
    CorrectionLayer,
    EncoderParams,
    HeadParams,
    encoder_tensors,
    forward_backward,
    forward_probs,
    head_tensors,
    init_encoder,
    init_head,
)
from .textproc import ChunkedDocument, Vocabulary, chunk, clean_text, tokenize
from .util import ConfigError, DataError, NumericsError, derive_rng, thread_count

ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8

BOOTSTRAP_MODES = ("none", "equal", "hyperc")


@dataclass
class TrainConfig:
    batch_size: int = 8
    learning_rate: float = 5e-5
    weight_decay: float = 0.1
    dropout: float = 0.1
    warmup_steps: int = -1  # -1: 5% of max_steps
    max_steps: int = 1000
    seed: int = 2022
    loss: str = "bce"
    asl_gamma_pos: float = 1.0
    asl_gamma_neg: float = 4.0
    asl_margin: float = 0.05
    loss_weight: float = 1.0
    bootstrap: str = "equal"
    negative_sampling: bool = True
    c: int = 16
    s: int = 8
    binary_threshold: float = 0.5
    decision_threshold: float = 0.5
    hidden_size: int = 32
    n_layers: int = 1
    min_frequency: int = 1
    log_interval: int = 50
    clip_norm: float = 1.0  # 0 disables clipping

    def __post_init__(self):
        if self.loss not in ("bce", "asl"):
            raise ConfigError(f"loss must be 'bce' or 'asl', got {self.loss!r}")
        if self.bootstrap not in BOOTSTRAP_MODES:
            raise ConfigError(f"bootstrap must be one of {BOOTSTRAP_MODES}, got {self.bootstrap!r}")
        for name in ("binary_threshold", "decision_threshold"):
            v = getattr(self, name)
            if not 0.0 < v < 1.0:
                raise ConfigError(f"{name} must be in (0, 1), got {v}")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError(f"dropout must be in [0, 1), got {self.dropout}")
        if self.batch_size < 1 or self.max_steps < 0:
            raise ConfigError("batch_size must be >= 1 and max_steps >= 0")
        if self.warmup_steps > self.max_steps:
            raise ConfigError("warmup_steps must not exceed max_steps")
        if self.seed < 0:
            raise ConfigError("seed must be >= 0")

    @property
    def warmup(self) -> int:
        if self.warmup_steps >= 0:
            return self.warmup_steps
        return round(0.05 * self.max_steps)

    def loss_config(self) -> LossConfig:
        return LossConfig(
            kind=self.loss,
            gamma_pos=self.asl_gamma_pos,
            gamma_neg=self.asl_gamma_neg,
            margin=self.asl_margin,
            weight=self.loss_weight,
        )


@dataclass
class LevelModel:
    """Trainable parameters of one sub-model in the chain (or the flat model)."""

    enc: EncoderParams
    head: HeadParams
    level: int
    provenance: str = "random"  # random | bootstrap-equal | bootstrap-hyperc
    corr: Optional[CorrectionLayer] = None
    corr_inputs: Optional[np.ndarray] = None  # fixed label embeddings fed to corr

    @property
    def n_labels(self) -> int:
        return self.head.n_labels

    def trainable(self):
        yield from encoder_tensors(self.enc)
        yield from head_tensors(self.head)
        if self.corr is not None:
            yield "corr.W", self.corr.W
            yield "corr.b", self.corr.b

    def tensors(self):
        yield from self.trainable()
        if self.corr_inputs is not None:
            yield "corr.E", self.corr_inputs

    def effective_w_la(self) -> np.ndarray:
        """Attention queries actually used: base W_la plus the correction, if any."""
        if self.corr is None:
            return self.head.W_la
        return self.head.W_la + self.corr.apply(self.corr_inputs)


def init_level_model(vocab_size: int, level: int, n_labels: int, cfg: TrainConfig,
                     rng: np.random.Generator) -> LevelModel:
    enc = init_encoder(vocab_size, cfg.hidden_size, cfg.c, cfg.n_layers, rng)
    head = init_head(n_labels, cfg.hidden_size, rng)
    return LevelModel(enc, head, level, "random")


# ---------------------------------------------------------------------------
# bootstrapping


def _copy_encoder(enc: EncoderParams) -> EncoderParams:
    from .network import BlockParams

    blocks = [
        BlockParams(**{f: getattr(b, f).copy() for f in BlockParams.FIELDS})
        for b in enc.blocks
    ]
    return EncoderParams(enc.emb.copy(), enc.pos.copy(), blocks)


def bootstrap_equal(parent: LevelModel, T: IndexingMatrix) -> LevelModel:
    """Child init: encoder copied verbatim, head rows gathered from each parent row."""
    if T.n_cols != parent.n_labels:
        raise DataError(
            f"indexing matrix has {T.n_cols} columns but parent model has {parent.n_labels} labels"
        )
    idx = T.parent_index
    w_la_parent = parent.effective_w_la()
    head = HeadParams(
        W_la=w_la_parent[idx].copy(),
        W_cl=parent.head.W_cl[idx].copy(),
        b_cl=parent.head.b_cl[idx].copy(),
    )
    return LevelModel(_copy_encoder(parent.enc), head, parent.level + 1, "bootstrap-equal")


def bootstrap_hyperc(parent: LevelModel, T: IndexingMatrix, E_child: np.ndarray,
                     f: Optional[CorrectionLayer] = None) -> LevelModel:
    """Child init like bootstrap_equal plus a per-label additive correction f(E).

    The correction layer defaults to the zero map and stays trainable during
    the child level's training; the effective attention queries are
    base + f(E_child) row-wise.
    """
    model = bootstrap_equal(parent, T)
    E_child = np.asarray(E_child, dtype=np.float64)
    if E_child.shape[0] != T.rows:
        raise DataError(
            f"embedding matrix has {E_child.shape[0]} rows but the child level has {T.rows} labels"
        )
    hidden = parent.head.W_la.shape[1]
    if f is None:
        f = CorrectionLayer.zeros(E_child.shape[1], hidden)
    if f.W.shape != (E_child.shape[1], hidden):
        raise DataError(
            f"correction layer maps {f.W.shape[0]} dims but embeddings have {E_child.shape[1]}"
        )
    model.corr = CorrectionLayer(f.W.copy(), f.b.copy())
    model.corr_inputs = E_child.copy()
    model.provenance = "bootstrap-hyperc"
    return model


# ---------------------------------------------------------------------------
# dynamic negative sampling


def training_mask(p_parent, y_parent, T: IndexingMatrix, threshold: float = 0.5) -> np.ndarray:
    """Child labels whose parent is gold or predicted positive: binary(p + y) gathered by T.

    binary(x) = 1 iff x >= threshold, so a gold parent (y = 1) always passes.
    """
    p_parent = np.asarray(p_parent, dtype=np.float64)
    y_parent = np.asarray(y_parent, dtype=np.float64)
    if p_parent.shape != y_parent.shape or p_parent.shape[0] != T.n_cols:
        raise DataError(
            f"expected parent vectors of length {T.n_cols}, got {p_parent.shape} and {y_parent.shape}"
        )
    parent_on = (p_parent + y_parent) >= threshold
    return parent_on[T.parent_index].astype(np.uint8)


def inference_mask(p_parent, T: IndexingMatrix, threshold: float = 0.5) -> np.ndarray:
    """training_mask with the gold term omitted: children of predicted-positive parents."""
    p_parent = np.asarray(p_parent, dtype=np.float64)
    if p_parent.shape[0] != T.n_cols:
        raise DataError(f"expected a parent vector of length {T.n_cols}, got {p_parent.shape}")
    parent_on = p_parent >= threshold
    return parent_on[T.parent_index].astype(np.uint8)


# ---------------------------------------------------------------------------
# optimizer and schedule


class AdamW:
    """Adaptive-moment optimizer with decoupled weight decay, beta 0.9/0.999, eps 1e-8."""

    def __init__(self, model: LevelModel, weight_decay: float = 0.0):
        self.weight_decay = weight_decay
        self.t = 0
        self.m = {name: np.zeros_like(p) for name, p in model.trainable()}
        self.v = {name: np.zeros_like(p) for name, p in model.trainable()}

    def step(self, model: LevelModel, grads: dict, lr: float) -> None:
        self.t += 1
        bc1 = 1.0 - ADAM_BETA1**self.t
        bc2 = 1.0 - ADAM_BETA2**self.t
        for name, theta in model.trainable():
            g = grads[name]
            m = self.m[name]
            v = self.v[name]
            m *= ADAM_BETA1
            m += (1.0 - ADAM_BETA1) * g
            v *= ADAM_BETA2
            v += (1.0 - ADAM_BETA2) * g * g
            update = (m / bc1) / (np.sqrt(v / bc2) + ADAM_EPS)
            theta -= lr * (update + self.weight_decay * theta)


def lr_at(step: int, peak: float, warmup: int, max_steps: int) -> float:
    """Linear warmup then linear decay to zero; step 0 uses (step+1)/warmup."""
    if max_steps <= 0:
        return 0.0
    if step < warmup:
        return peak * (step + 1) / warmup
    if max_steps == warmup:
        return peak
    return peak * max(0, max_steps - step) / (max_steps - warmup)


def clip_gradients(grads: dict, max_norm: float) -> float:
    """Scale all gradients so their global L2 norm is at most max_norm; returns the norm."""
    total = np.sqrt(sum(float((g * g).sum()) for g in grads.values()))
    if max_norm > 0 and total > max_norm:
        factor = max_norm / total
        for g in grads.values():
            g *= factor
    return total


# ---------------------------------------------------------------------------
# datasets


@dataclass
class PreparedDataset:
    """Tokenized, chunked documents plus their code-level gold labels."""

    doc_ids: list
    docs: list  # ChunkedDocument per instance
    labels: LabelMatrix  # code level
    vocab: Vocabulary


def prepare_dataset(raw_docs, vocab: Vocabulary, tree: CodeTree, c: int, s: int) -> PreparedDataset:
    doc_ids, docs, rows = [], [], []
    for raw in raw_docs:
        ids = tokenize(clean_text(raw.text), vocab)
        if ids.size == 0:
            raise DataError(f"document {raw.doc_id!r} has no tokens after cleaning")
        doc_ids.append(raw.doc_id)
        docs.append(chunk(ids, c, s))
        rows.append(raw.codes)
    n_leaves = tree.nodes_per_level[-1]
    return PreparedDataset(doc_ids, docs, LabelMatrix(n_leaves, rows), vocab)


def _dense_row(rows, i, n_labels) -> np.ndarray:
    y = np.zeros(n_labels, dtype=np.uint8)
    y[rows[i]] = 1
    return y


# ---------------------------------------------------------------------------
# training loops


def _train_level(docs, label_rows, n_labels: int, masks, model: LevelModel,
                 cfg: TrainConfig, level_tag: int, log_path: Optional[str] = None):
    """Run the optimizer for cfg.max_steps over the documents; returns step history.

    ``masks`` is either None (all labels active) or one uint8 vector per
    document. Per-document forward/backward calls may run on worker threads
    (XRLAT_THREADS); gradients are reduced in fixed document order so results
    are bitwise identical regardless of thread count.
    """
    n_docs = len(docs)
    if n_docs == 0:
        raise DataError("cannot train on an empty dataset")
    data_rng = derive_rng(cfg.seed, "data", level_tag)
    opt = AdamW(model, weight_decay=cfg.weight_decay)
    loss_cfg = cfg.loss_config()
    warmup = cfg.warmup
    history = []
    log_lines = []
    workers = thread_count()
    pool = ThreadPoolExecutor(max_workers=workers) if workers > 1 else None

    def run_doc(args):
        i, rng = args
        gold = _dense_row(label_rows, i, n_labels)
        mask = None if masks is None else masks[i]
        return forward_backward(
            docs[i], model.enc, model.head, gold, mask, loss_cfg,
            corr=model.corr, corr_inputs=model.corr_inputs,
            dropout=cfg.dropout, rng=rng,
        )

    try:
        step = 0
        while step < cfg.max_steps:
            order = data_rng.permutation(n_docs)
            for start in range(0, n_docs, cfg.batch_size):
                if step >= cfg.max_steps:
                    break
                batch = order[start : start + cfg.batch_size]
                step_ss = np.random.SeedSequence([cfg.seed, level_tag, step])
                rngs = (
                    [np.random.default_rng(s) for s in step_ss.spawn(len(batch))]
                    if cfg.dropout > 0.0
                    else [None] * len(batch)
                )
                jobs = list(zip((int(i) for i in batch), rngs))
                try:
                    if pool is None:
                        results = [run_doc(j) for j in jobs]
                    else:
                        results = list(pool.map(run_doc, jobs))
                except NumericsError as exc:
                    raise NumericsError(
                        f"{exc} at step {step}", tensor=exc.tensor, step=step
                    ) from None
                batch_loss = float(np.mean([r[0] for r in results]))
                grads = results[0][1]
                for _, g in results[1:]:
                    for name in grads:
                        grads[name] += g[name]
                inv = 1.0 / len(results)
                for name in grads:
                    grads[name] *= inv
                clip_gradients(grads, cfg.clip_norm)
                lr = lr_at(step, cfg.learning_rate, warmup, cfg.max_steps)
                opt.step(model, grads, lr)
                history.append((step, lr, batch_loss))
                if (step + 1) % cfg.log_interval == 0 or step + 1 == cfg.max_steps:
                    log_lines.append(f"{step}\t{lr:.6f}\t{batch_loss:.6f}")
                step += 1
    finally:
        if pool is not None:
            pool.shutdown()
    if log_path is not None:
        from .util import atomic_write_text

        atomic_write_text(log_path, "\n".join(log_lines) + ("\n" if log_lines else ""))
    return history


def train_flat(data: PreparedDataset, tree: CodeTree, cfg: TrainConfig,
               out_dir: Optional[str] = None):
    """Train a single code-level model with every label active.

    Returns (model, history); with out_dir set, also writes flat.ckpt and
    train_flat.log there.
    """
    n_labels = tree.nodes_per_level[-1]
    model = init_level_model(data.vocab.size, 4, n_labels, cfg, derive_rng(cfg.seed, "init", 4))
    log_path = os.path.join(out_dir, "train_flat.log") if out_dir else None
    history = _train_level(data.docs, data.labels.rows, n_labels, None, model, cfg, 4, log_path)
    if out_dir:
        from .checkpoint import save_model

        save_model(os.path.join(out_dir, "flat.ckpt"), model, cfg, data.vocab.size)
    return model, history


def _level_probs(model: LevelModel, doc: ChunkedDocument, mask) -> np.ndarray:
    return forward_probs(doc, model.enc, model.head, mask,
                         corr=model.corr, corr_inputs=model.corr_inputs)


def train_xr_lat(data: PreparedDataset, tree: CodeTree, cfg: TrainConfig,
                 out_dir: Optional[str] = None,
                 embeddings: Optional[PoincareEmbeddings] = None):
    """Waterfall-train the four-level model chain.

    Level 1 trains with full masks from a random init. Each subsequent level
    is initialized per cfg.bootstrap and, when cfg.negative_sampling is on,
    trained per instance only on children of parents that are gold or were
    predicted positive by the (frozen) parent model. Returns
    (models, histories).
    """
    if cfg.bootstrap == "hyperc" and embeddings is None:
        raise ConfigError("bootstrap=hyperc requires Poincare embeddings")

    def emb_level(k):
        # accepts a PoincareEmbeddings or a {level: matrix} mapping
        if hasattr(embeddings, "level"):
            return embeddings.level(k)
        return np.asarray(embeddings[k], dtype=np.float64)

    level_rows = [None] * 5  # 1-based
    level_rows[4] = data.labels.rows
    label_mat = data.labels
    for k in (4, 3, 2):
        label_mat = propagate_labels(label_mat, tree.indexing_matrix(k))
        level_rows[k - 1] = label_mat.rows
    sizes = tree.nodes_per_level

    models, histories = [], []
    prev_model: Optional[LevelModel] = None
    prev_masks = None
    for k in range(1, 5):
        n_labels = sizes[k - 1]
        if k == 1 or cfg.bootstrap == "none":
            model = init_level_model(data.vocab.size, k, n_labels, cfg,
                                     derive_rng(cfg.seed, "init", k))
        elif cfg.bootstrap == "equal":
            model = bootstrap_equal(prev_model, tree.indexing_matrix(k))
        else:
            E_k = emb_level(k)
            if E_k.shape[0] != n_labels:
                raise ConfigError(
                    f"embeddings for level {k} have {E_k.shape[0]} rows, tree has {n_labels}"
                )
            model = bootstrap_hyperc(prev_model, tree.indexing_matrix(k), E_k)

        masks = None
        if k > 1 and cfg.negative_sampling:
            T_k = tree.indexing_matrix(k)
            masks = []
            for i, doc in enumerate(data.docs):
                parent_mask = None if prev_masks is None else prev_masks[i]
                p_parent = _level_probs(prev_model, doc, parent_mask)
                y_parent = _dense_row(level_rows[k - 1], i, sizes[k - 2])
                masks.append(training_mask(p_parent, y_parent, T_k, cfg.binary_threshold))

        log_path = os.path.join(out_dir, f"train_level{k}.log") if out_dir else None
        history = _train_level(data.docs, level_rows[k], n_labels, masks, model, cfg, k, log_path)
        if out_dir:
            from .checkpoint import save_model

            save_model(os.path.join(out_dir, f"level{k}.ckpt"), model, cfg, data.vocab.size)
        models.append(model)
        histories.append(history)
        prev_model, prev_masks = model, masks
    return models, histories


# ---------------------------------------------------------------------------
# prediction


def predict(models, doc: ChunkedDocument, tree: CodeTree, cfg: TrainConfig) -> np.ndarray:
    """Code-level probabilities for one document.

    A single model runs one full forward pass. A four-model chain with
    negative sampling cascades level 1 to 4, masking each level's labels to
    children of parents predicted positive (masked codes score exactly 0);
    without negative sampling only the final model is scored, over all codes.
    """
    if isinstance(models, LevelModel):
        return _level_probs(models, doc, None)
    models = list(models)
    if len(models) != 4:
        raise ConfigError(f"expected 1 or 4 models, got {len(models)}")
    if not cfg.negative_sampling:
        return _level_probs(models[3], doc, None)
    mask = None
    p = None
    for k in range(1, 5):
        p = _level_probs(models[k - 1], doc, mask)
        if k < 4:
            mask = inference_mask(p, tree.indexing_matrix(k + 1), cfg.binary_threshold)
    return p


def predict_dataset(models, data: PreparedDataset, tree: CodeTree, cfg: TrainConfig) -> np.ndarray:
    """Stacked predict() scores, one row per document (threaded via XRLAT_THREADS)."""
    workers = thread_count()
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            rows = list(pool.map(lambda d: predict(models, d, tree, cfg), data.docs))
    else:
        rows = [predict(models, d, tree, cfg) for d in data.docs]
    n_labels = tree.nodes_per_level[-1]
    return np.stack(rows) if rows else np.zeros((0, n_labels))
