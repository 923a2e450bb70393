"""The three architectures compared by the engine, at toy scale:

(a) a token-by-token generative decoder over a word vocabulary (the
    timing/quality baseline),
(b) a mean-pool retrieval baseline scoring pooled inputs against the fixed
    vocabulary matrix, and
(c) the generative-retrieval model: a small causal transformer whose
    trailing retrieval token's output embedding is scored against fixed,
    never-updated vocabulary embeddings, trained with an in-batch InfoNCE
    objective at temperature 0.05.

Checkpoints use the NVCK named-tensor container (see save_checkpoint).
"""

from __future__ import annotations

import json
import math
import re
import struct
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from . import nn
from .datagen import Dataset, InstructionSample, QUERY_TEXTS, Stream
from .embed import encode_clip, normalize_rows, stub_encode_text
from .errors import DimMismatch, FormatError, NonFiniteLoss, SeqTooLong

RET_INITS = ("eos", "learnable", "pool")

PAD, EOS = 0, 1


def words_of(text: str) -> list[str]:
    return [w for w in re.sub(r"[?.,!]", "", text.lower()).split() if w]


@dataclass
class WordVocab:
    """Closed word-level vocabulary for query strings and decoded narrations."""

    words: list[str]  # index 0 = <pad>, 1 = <eos>
    ids: dict[str, int] = field(default_factory=dict)

    def __post_init__(self):
        if not self.ids:
            self.ids = {w: i for i, w in enumerate(self.words)}

    def __len__(self) -> int:
        return len(self.words)

    def encode(self, text: str, max_len: int) -> tuple[np.ndarray, np.ndarray]:
        toks = [self.ids[w] for w in words_of(text) if w in self.ids]
        if len(toks) > max_len:
            raise SeqTooLong(f"query of {len(toks)} tokens exceeds the {max_len}-slot query block")
        ids = np.full(max_len, PAD, dtype=np.int64)
        mask = np.zeros(max_len, dtype=np.float64)
        ids[: len(toks)] = toks
        mask[: len(toks)] = 1.0
        return ids, mask


def build_word_vocab(texts: list[str]) -> WordVocab:
    seen: dict[str, None] = {}
    for t in list(QUERY_TEXTS.values()) + list(texts):
        for w in words_of(t):
            seen.setdefault(w, None)
    return WordVocab(words=["<pad>", "<eos>"] + sorted(seen))


@dataclass
class ModelConfig:
    d_model: int = 64
    n_layers: int = 2
    n_heads: int = 4
    d_embed: int = 64  # vocabulary embedding width
    query_vocab_size: int = 0  # filled in when the word vocab is known
    max_visual_tokens: int = 8
    max_query_tokens: int = 12
    ret_init: str = "pool"
    temperature: float = 0.05
    normalize_outputs: bool = True
    dtype: str = "float32"
    seed: int = 0

    def __post_init__(self):
        if self.d_model % self.n_heads != 0:
            raise ValueError("d_model must be divisible by n_heads")
        if self.temperature <= 0:
            raise ValueError("temperature must be > 0")
        if self.ret_init not in RET_INITS:
            raise ValueError(f"ret_init must be one of {RET_INITS}")

    @property
    def max_seq_len(self) -> int:
        return self.max_visual_tokens + self.max_query_tokens + 1

    def to_dict(self) -> dict:
        return {
            "d_model": self.d_model,
            "n_layers": self.n_layers,
            "n_heads": self.n_heads,
            "d_embed": self.d_embed,
            "query_vocab_size": self.query_vocab_size,
            "max_visual_tokens": self.max_visual_tokens,
            "max_query_tokens": self.max_query_tokens,
            "ret_init": self.ret_init,
            "temperature": self.temperature,
            "normalize_outputs": self.normalize_outputs,
            "dtype": self.dtype,
            "seed": self.seed,
        }


class GenRetModel:
    """Causal transformer mapping [visual tokens, query tokens, retrieval
    token] to one retrieval embedding in the vocabulary space."""

    def __init__(self, config: ModelConfig, word_vocab: WordVocab):
        config = replace(config, query_vocab_size=len(word_vocab))
        self.config = config
        self.word_vocab = word_vocab
        self.params: dict[str, nn.Tensor] = {}
        self._init_params()

    # -- parameters -------------------------------------------------------

    def _param(self, name: str, data: np.ndarray) -> nn.Tensor:
        t = nn.Tensor(np.asarray(data, dtype=self.config.dtype), requires_grad=True)
        self.params[name] = t
        return t

    def _init_params(self):
        cfg = self.config
        rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 0xB00C]))
        d, D = cfg.d_model, cfg.d_embed

        # Visual projection and retrieval head start at identity when the
        # widths match, so the untrained model behaves like the mean-pool
        # retrieval baseline and training only has to add reasoning.
        if d == D:
            w_vis = np.eye(D)
            w_head = np.eye(d)
        else:
            w_vis = rng.normal(0, 1.0 / math.sqrt(D), (D, d))
            w_head = rng.normal(0, 1.0 / math.sqrt(d), (d, D))
        self._param("w_vis", w_vis)
        self._param("b_vis", np.zeros(d))
        self._param("tok_emb", rng.normal(0, 0.02, (cfg.query_vocab_size, d)))
        self._param("pos_emb", np.zeros((cfg.max_seq_len, d)))
        self._param("ret_tok", rng.normal(0, 0.02, d))
        for l in range(cfg.n_layers):
            self._param(f"l{l}.ln1_g", np.ones(d))
            self._param(f"l{l}.ln1_b", np.zeros(d))
            self._param(f"l{l}.w_qkv", rng.normal(0, 0.02, (d, 3 * d)))
            self._param(f"l{l}.b_qkv", np.zeros(3 * d))
            self._param(f"l{l}.w_att_o", np.zeros((d, d)))  # zero residual branch at init
            self._param(f"l{l}.b_att_o", np.zeros(d))
            self._param(f"l{l}.ln2_g", np.ones(d))
            self._param(f"l{l}.ln2_b", np.zeros(d))
            self._param(f"l{l}.w_fc", rng.normal(0, 0.02, (d, 4 * d)))
            self._param(f"l{l}.b_fc", np.zeros(4 * d))
            self._param(f"l{l}.w_proj", np.zeros((4 * d, d)))
            self._param(f"l{l}.b_proj", np.zeros(d))
        if cfg.n_layers > 0:
            self._param("lnf_g", np.ones(d))
            self._param("lnf_b", np.zeros(d))
        self._param("w_head", w_head)
        self._param("b_head", np.zeros(D))

    def cast(self, dtype: str) -> "GenRetModel":
        """Copy of this model with parameters stored at another precision."""
        other = GenRetModel(replace(self.config, dtype=dtype), self.word_vocab)
        for k, p in self.params.items():
            other.params[k].data = p.data.astype(dtype)
        return other

    # -- forward ----------------------------------------------------------

    def _blocks(self, x: nn.Tensor, mask_add: np.ndarray) -> nn.Tensor:
        cfg = self.config
        d, H = cfg.d_model, cfg.n_heads
        hd = d // H
        B, T = x.shape[0], x.shape[1]
        p = self.params
        for l in range(cfg.n_layers):
            h = nn.layer_norm(x, p[f"l{l}.ln1_g"], p[f"l{l}.ln1_b"])
            qkv = nn.add(nn.matmul(h, p[f"l{l}.w_qkv"]), p[f"l{l}.b_qkv"])
            parts = []
            for i in range(3):
                part = nn.index(qkv, (slice(None), slice(None), slice(i * d, (i + 1) * d)))
                part = nn.transpose(nn.reshape(part, (B, T, H, hd)), (0, 2, 1, 3))
                parts.append(part)
            q, k, v = parts
            att = nn.scale(nn.matmul(q, nn.transpose(k, (0, 1, 3, 2))), 1.0 / math.sqrt(hd))
            probs = nn.softmax(att, mask=mask_add)
            o = nn.reshape(nn.transpose(nn.matmul(probs, v), (0, 2, 1, 3)), (B, T, d))
            o = nn.add(nn.matmul(o, p[f"l{l}.w_att_o"]), p[f"l{l}.b_att_o"])
            x = nn.add(x, o)
            h2 = nn.layer_norm(x, p[f"l{l}.ln2_g"], p[f"l{l}.ln2_b"])
            m = nn.gelu(nn.add(nn.matmul(h2, p[f"l{l}.w_fc"]), p[f"l{l}.b_fc"]))
            m = nn.add(nn.matmul(m, p[f"l{l}.w_proj"]), p[f"l{l}.b_proj"])
            x = nn.add(x, m)
        return x

    def _assemble(self, visual: np.ndarray, vis_mask: np.ndarray, query_ids: np.ndarray, q_mask: np.ndarray):
        """Embed and concatenate [visual | query | retrieval token], with the
        additive attention mask (causal + key padding)."""
        cfg = self.config
        dtype = self.config.dtype
        p = self.params
        B = visual.shape[0]
        visual = np.asarray(visual, dtype=dtype)
        vis_mask = np.asarray(vis_mask, dtype=dtype)
        q_mask = np.asarray(q_mask, dtype=dtype)

        x_vis = nn.add(nn.matmul(nn.constant(visual), p["w_vis"]), p["b_vis"])
        q_emb = nn.gather(p["tok_emb"], query_ids)

        if cfg.ret_init == "pool":
            masked = nn.mul(x_vis, nn.constant(vis_mask[:, :, None]))
            counts = np.maximum(vis_mask.sum(axis=1, keepdims=True), 1.0)
            ret = nn.mul(nn.sum_axis(masked, axis=1), nn.constant(1.0 / counts))
        elif cfg.ret_init == "learnable":
            ret = nn.add(nn.constant(np.zeros((B, cfg.d_model), dtype=dtype)), p["ret_tok"])
        else:  # eos: the shared EOS row of the query embedding table
            ret = nn.gather(p["tok_emb"], np.full((B,), EOS, dtype=np.int64))
        ret = nn.reshape(ret, (B, 1, cfg.d_model))

        x = nn.concat([x_vis, q_emb, ret], axis=1)
        T = x.shape[1]
        if T > cfg.max_seq_len:
            raise SeqTooLong(f"sequence of {T} exceeds max_seq_len={cfg.max_seq_len}")
        x = nn.add(x, nn.reshape(nn.index(p["pos_emb"], (slice(0, T),)), (1, T, cfg.d_model)))

        key_mask = np.concatenate([vis_mask, q_mask, np.ones((B, 1), dtype=dtype)], axis=1)
        neg = np.asarray(-1e9, dtype=dtype)
        causal = np.where(np.tril(np.ones((T, T), dtype=bool)), 0.0, neg).astype(dtype)
        pad = np.where(key_mask[:, None, None, :] > 0, 0.0, neg).astype(dtype)
        return x, (causal[None, None, :, :] + pad)

    def forward_batch(
        self, visual: np.ndarray, vis_mask: np.ndarray, query_ids: np.ndarray, q_mask: np.ndarray
    ) -> nn.Tensor:
        """Retrieval embeddings for a batch; returns a (B, d_embed) tensor."""
        x, mask_add = self._assemble(visual, vis_mask, query_ids, q_mask)
        x = self._blocks(x, mask_add)
        h = nn.index(x, (slice(None), -1))
        if self.config.n_layers > 0:
            h = nn.layer_norm(h, self.params["lnf_g"], self.params["lnf_b"])
        out = nn.add(nn.matmul(h, self.params["w_head"]), self.params["b_head"])
        if self.config.normalize_outputs:
            out = nn.l2_normalize(out)
        return out

    def forward_retrieval(self, visual_tokens: np.ndarray, query_text: str) -> np.ndarray:
        """Single-sample retrieval embedding (no gradient)."""
        cfg = self.config
        visual_tokens = np.atleast_2d(np.asarray(visual_tokens))
        n = visual_tokens.shape[0]
        if n > cfg.max_visual_tokens:
            raise SeqTooLong(f"{n} visual tokens exceed the {cfg.max_visual_tokens}-slot visual block")
        vis = np.zeros((1, cfg.max_visual_tokens, cfg.d_embed))
        mask = np.zeros((1, cfg.max_visual_tokens))
        vis[0, cfg.max_visual_tokens - n :] = visual_tokens
        mask[0, cfg.max_visual_tokens - n :] = 1.0
        ids, qmask = self.word_vocab.encode(query_text, cfg.max_query_tokens)
        out = self.forward_batch(vis, mask, ids[None, :], qmask[None, :])
        return out.data[0]

    def score(self, t: np.ndarray, vocab_matrix: np.ndarray) -> np.ndarray:
        """Dot products of a retrieval embedding against fixed vocabulary rows."""
        rows = vocab_matrix.rows if hasattr(vocab_matrix, "rows") else np.asarray(vocab_matrix)
        if rows.shape[-1] != t.shape[-1]:
            raise DimMismatch(f"embedding dim {t.shape[-1]} vs vocabulary dim {rows.shape[-1]}")
        return rows @ t


def nce_loss(t_batch: nn.Tensor | np.ndarray, target_rows: np.ndarray, tau: float = 0.05) -> nn.Tensor:
    """In-batch InfoNCE (negatives are the other samples' targets)."""
    if not isinstance(t_batch, nn.Tensor):
        t_batch = nn.Tensor(np.asarray(t_batch))
    return nn.info_nce(t_batch, target_rows, tau)


# -- training data assembly ----------------------------------------------


@dataclass
class Example:
    visual: np.ndarray  # (n, d_embed) pooled clip embeddings, most recent last
    query_text: str
    target_row: np.ndarray
    target_id: int  # entry id within its candidate set
    candidates: str  # "prefix" | "scene" | "postfix"
    relation: str
    row_index: int  # row of the target within its candidate matrix
    sample: InstructionSample | None = None


def span_visual(stream: Stream, sample: InstructionSample, max_tokens: int) -> np.ndarray:
    """Pooled clip embeddings for a sample's span, truncated to the window
    that keeps the informative end (earliest clips for 'before', most
    recent otherwise)."""
    lo, hi = sample.clip_span
    clips = stream.clips[lo:hi]
    if len(clips) > max_tokens:
        clips = clips[:max_tokens] if sample.relation == "before" else clips[-max_tokens:]
    return np.stack([encode_clip(c.frames).pooled for c in clips])


def _examples_for(
    samples: list[InstructionSample],
    dataset: Dataset,
    matrices: dict[str, np.ndarray],
    max_visual_tokens: int,
    include_postfix: bool = True,
) -> list[Example]:
    """Expand instruction samples into (visual, query, target-row) examples.

    Each sample yields a first-pass example against the prefix (or scene)
    matrix; when the world has real postfixes, non-scene samples also yield
    a chained second-pass example whose query appends the ground-truth
    prefix text, targeting the postfix matrix.
    """
    vocab = dataset.world.vocabulary
    kind_row = {k: {eid: i for i, eid in enumerate(vocab.by_kind[k])} for k in ("scene", "prefix", "postfix")}
    has_postfixes = len(vocab.by_kind["postfix"]) > 1
    out: list[Example] = []
    for sample in samples:
        stream = dataset.streams[sample.stream_idx]
        visual = span_visual(stream, sample, max_visual_tokens)
        kind = "scene" if sample.relation == "scene" else "prefix"
        row = kind_row[kind][sample.target_id]
        out.append(
            Example(
                visual=visual,
                query_text=sample.query_text,
                target_row=matrices[kind][row],
                target_id=sample.target_id,
                candidates=kind,
                relation=sample.relation,
                row_index=row,
                sample=sample,
            )
        )
        if include_postfix and has_postfixes and sample.relation != "scene":
            prefix_text = vocab.entries[sample.target_id].text
            prow = kind_row["postfix"][sample.target_postfix_id]
            out.append(
                Example(
                    visual=visual,
                    query_text=f"{sample.query_text} {prefix_text}",
                    target_row=matrices["postfix"][prow],
                    target_id=sample.target_postfix_id,
                    candidates="postfix",
                    relation=sample.relation,
                    row_index=prow,
                    sample=sample,
                )
            )
    return out


def _pack_batch(model: GenRetModel, batch: list[Example]):
    cfg = model.config
    B, V = len(batch), cfg.max_visual_tokens
    visual = np.zeros((B, V, cfg.d_embed))
    vis_mask = np.zeros((B, V))
    query_ids = np.zeros((B, cfg.max_query_tokens), dtype=np.int64)
    q_mask = np.zeros((B, cfg.max_query_tokens))
    targets = np.zeros((B, cfg.d_embed))
    for i, ex in enumerate(batch):
        n = ex.visual.shape[0]
        visual[i, V - n :] = ex.visual
        vis_mask[i, V - n :] = 1.0
        query_ids[i], q_mask[i] = model.word_vocab.encode(ex.query_text, cfg.max_query_tokens)
        targets[i] = ex.target_row
    return visual, vis_mask, query_ids, q_mask, targets


def _unique_target_batches(examples: list[Example], batch_size: int, rng: np.random.Generator):
    """Shuffle and group into batches without duplicate targets inside one
    batch (duplicate positives would act as false negatives for InfoNCE)."""
    order = list(rng.permutation(len(examples)))
    pending = [examples[i] for i in order]
    while pending:
        batch: list[Example] = []
        keys: set[tuple[str, int]] = set()
        rest: list[Example] = []
        for ex in pending:
            key = (ex.candidates, ex.target_id)
            if len(batch) < batch_size and key not in keys:
                batch.append(ex)
                keys.add(key)
            else:
                rest.append(ex)
        pending = rest
        yield batch


@dataclass
class TrainLog:
    epochs: list[dict] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {"epochs": self.epochs}


def train(
    model: GenRetModel,
    dataset: Dataset,
    matrices: dict[str, np.ndarray],
    lr: float = 3e-4,
    batch_size: int = 32,
    epochs: int = 10,
    seed: int = 0,
    checkpoint_path: str | Path | None = None,
    eval_every: int = 0,
) -> TrainLog:
    """Train in place with Adam; deterministic given `seed`.

    A non-finite loss aborts with NonFiniteLoss after restoring the last
    epoch-end parameter snapshot (also written to `checkpoint_path` when
    given).
    """
    examples = _examples_for(dataset.train, dataset, matrices, model.config.max_visual_tokens)
    opt = nn.Adam(model.params, lr=lr)
    rng = np.random.default_rng(seed)
    log = TrainLog()
    snapshot = {k: p.data.copy() for k, p in model.params.items()}
    before = {k: matrices[k].copy() for k in matrices}
    for epoch in range(epochs):
        total, n_batches = 0.0, 0
        for batch in _unique_target_batches(examples, batch_size, rng):
            visual, vis_mask, query_ids, q_mask, targets = _pack_batch(model, batch)
            t = model.forward_batch(visual, vis_mask, query_ids, q_mask)
            loss = nce_loss(t, targets, model.config.temperature)
            if not np.isfinite(loss.data):
                for k, p in model.params.items():
                    p.data = snapshot[k]
                if checkpoint_path is not None:
                    save_checkpoint(model, checkpoint_path)
                raise NonFiniteLoss(f"loss became non-finite at epoch {epoch}")
            opt.zero_grad()
            loss.backward()
            opt.step()
            total += float(loss.data)
            n_batches += 1
        snapshot = {k: p.data.copy() for k, p in model.params.items()}
        record = {"epoch": epoch, "train_loss": total / max(n_batches, 1)}
        if eval_every and (epoch + 1) % eval_every == 0:
            record["eval"] = evaluate(model, dataset, matrices).to_dict()
        log.epochs.append(record)
    for k in matrices:
        assert np.array_equal(matrices[k], before[k]), "vocabulary matrices must stay fixed"
    if checkpoint_path is not None:
        save_checkpoint(model, checkpoint_path)
    return log


# -- evaluation -----------------------------------------------------------


def rank_ids(scores: np.ndarray, entry_ids: list[int], k: int) -> list[int]:
    order = np.lexsort((entry_ids, -scores))[:k]
    return [int(entry_ids[i]) for i in order]


def evaluate(
    model: GenRetModel,
    dataset: Dataset,
    matrices: dict[str, np.ndarray],
    samples: list[InstructionSample] | None = None,
    batch_size: int = 64,
) -> "EvalSummary":
    """Recall@1/@5 per relation plus prefix+postfix chain exact match on the
    eval split, scored over the full candidate matrices."""
    from .metrics import EvalResult, chain_exact_match, recall_at_k

    vocab = dataset.world.vocabulary
    if samples is None:
        samples = dataset.eval
    examples = _examples_for(samples, dataset, matrices, model.config.max_visual_tokens, include_postfix=False)
    ranked: dict[str, list[list[int]]] = {}
    targets: dict[str, list[int]] = {}
    chain_pred: list[tuple[int, int]] = []
    chain_true: list[tuple[int, int]] = []
    ids_by_kind = {k: vocab.by_kind[k] for k in ("scene", "prefix", "postfix")}

    for start in range(0, len(examples), batch_size):
        batch = examples[start : start + batch_size]
        visual, vis_mask, query_ids, q_mask, _ = _pack_batch(model, batch)
        t = model.forward_batch(visual, vis_mask, query_ids, q_mask).data
        for i, ex in enumerate(batch):
            scores = matrices[ex.candidates] @ t[i]
            top = rank_ids(scores, ids_by_kind[ex.candidates], 5)
            ranked.setdefault(ex.relation, []).append(top)
            targets.setdefault(ex.relation, []).append(ex.target_id)
            if ex.candidates == "prefix":
                pred_prefix = top[0]
                chained = model.forward_retrieval(ex.visual, f"{ex.query_text} {vocab.entries[pred_prefix].text}")
                post_scores = matrices["postfix"] @ chained
                pred_post = rank_ids(post_scores, ids_by_kind["postfix"], 1)[0]
                chain_pred.append((pred_prefix, pred_post))
                assert ex.sample is not None
                chain_true.append((ex.sample.target_id, ex.sample.target_postfix_id))

    result = EvalResult(track="both")
    for rel in ranked:
        result.per_relation[rel] = {
            "n": len(targets[rel]),
            "recall@1": recall_at_k(ranked[rel], targets[rel], 1),
            "recall@5": recall_at_k(ranked[rel], targets[rel], 5),
        }
    result.chain_exact_match = chain_exact_match(chain_pred, chain_true) if chain_true else None
    return EvalSummary(result=result)


@dataclass
class EvalSummary:
    result: "object"

    def recall1(self, relations: tuple[str, ...]) -> float:
        per = self.result.per_relation
        n = sum(per[r]["n"] for r in relations if r in per)
        if n == 0:
            return 0.0
        return sum(per[r]["recall@1"] * per[r]["n"] for r in relations if r in per) / n

    def to_dict(self) -> dict:
        return self.result.to_dict()


# -- retrieval baseline ---------------------------------------------------


def retrieval_baseline(
    visual_tokens: np.ndarray,
    query_text: str | None,
    vocab_matrix: np.ndarray,
    entry_ids: list[int],
    k: int = 5,
    dim: int | None = None,
) -> list[int]:
    """Mean-pool baseline: naive track scores the pooled clip embedding;
    casual track pools the clip with the stub-encoded query first."""
    pooled = encode_clip(np.atleast_2d(visual_tokens)).pooled
    if query_text:
        q = stub_encode_text(query_text, dim or pooled.shape[-1])
        pooled = normalize_rows((pooled + q) / 2.0)
    scores = np.asarray(vocab_matrix) @ pooled
    return rank_ids(scores, entry_ids, k)


def baseline_eval(dataset: Dataset, matrices: dict[str, np.ndarray], track: str = "casual") -> "EvalSummary":
    """Recall of the mean-pool baseline on the eval split, per relation."""
    from .metrics import EvalResult, recall_at_k

    vocab = dataset.world.vocabulary
    ranked: dict[str, list[list[int]]] = {}
    targets: dict[str, list[int]] = {}
    for sample in dataset.eval:
        stream = dataset.streams[sample.stream_idx]
        visual = span_visual(stream, sample, max_tokens=10**9)
        kind = "scene" if sample.relation == "scene" else "prefix"
        query = sample.query_text if track == "casual" else None
        top = retrieval_baseline(visual, query, matrices[kind], vocab.by_kind[kind], k=5, dim=dataset.world.spec.dim)
        ranked.setdefault(sample.relation, []).append(top)
        targets.setdefault(sample.relation, []).append(sample.target_id)
    result = EvalResult(track=track)
    for rel in ranked:
        result.per_relation[rel] = {
            "n": len(targets[rel]),
            "recall@1": recall_at_k(ranked[rel], targets[rel], 1),
            "recall@5": recall_at_k(ranked[rel], targets[rel], 5),
        }
    return EvalSummary(result=result)


# -- generative baseline --------------------------------------------------


class GenerativeModel:
    """Token-by-token word decoder sharing the retrieval backbone shape;
    exists as the timing/quality comparator for generative decoding."""

    def __init__(self, config: ModelConfig, word_vocab: WordVocab, max_decode_len: int = 16):
        self.core = GenRetModel(replace(config, ret_init="learnable"), word_vocab)
        self.max_decode_len = max_decode_len
        rng = np.random.default_rng(np.random.SeedSequence([config.seed, 0x6E6]))
        self.core._param("w_lm", rng.normal(0, 0.02, (config.d_model, len(word_vocab))))
        self.core._param("b_lm", np.zeros(len(word_vocab)))

    @property
    def config(self) -> ModelConfig:
        return self.core.config

    @property
    def word_vocab(self) -> WordVocab:
        return self.core.word_vocab

    def _step_logits(self, visual: np.ndarray, token_ids: list[int]) -> np.ndarray:
        """Logits for the next token given the visual block plus the tokens
        decoded so far (recomputed from scratch each step: no KV cache)."""
        cfg = self.config
        n = min(visual.shape[0], cfg.max_visual_tokens)
        vis = np.zeros((1, cfg.max_visual_tokens, cfg.d_embed))
        mask = np.zeros((1, cfg.max_visual_tokens))
        vis[0, cfg.max_visual_tokens - n :] = visual[-n:]
        mask[0, cfg.max_visual_tokens - n :] = 1.0
        ids = np.full((1, cfg.max_query_tokens), PAD, dtype=np.int64)
        qmask = np.zeros((1, cfg.max_query_tokens))
        toks = token_ids[-cfg.max_query_tokens :]
        ids[0, : len(toks)] = toks
        qmask[0, : len(toks)] = 1.0
        x, mask_add = self.core._assemble(vis, mask, ids, qmask)
        x = self.core._blocks(x, mask_add)
        pos = cfg.max_visual_tokens + max(len(toks), 1) - 1
        h = nn.index(x, (slice(None), pos))
        if cfg.n_layers > 0:
            h = nn.layer_norm(h, self.core.params["lnf_g"], self.core.params["lnf_b"])
        logits = nn.add(nn.matmul(h, self.core.params["w_lm"]), self.core.params["b_lm"])
        return logits.data[0]

    def decode(self, visual_tokens: np.ndarray, query_text: str = "", length_cap: int | None = None) -> list[int]:
        """Greedy argmax decoding until EOS or the length cap."""
        cap = length_cap or self.max_decode_len
        visual = np.atleast_2d(np.asarray(visual_tokens))
        toks = [self.word_vocab.ids[w] for w in words_of(query_text) if w in self.word_vocab.ids]
        out: list[int] = []
        for _ in range(cap):
            logits = self._step_logits(visual, toks + out if (toks or out) else [EOS])
            nxt = int(np.argmax(logits))
            if nxt == EOS:
                break
            out.append(nxt)
        return out

    def decode_text(self, visual_tokens: np.ndarray, query_text: str = "") -> str:
        return " ".join(self.word_vocab.words[i] for i in self.decode(visual_tokens, query_text))

    def train_step(self, visual: np.ndarray, vis_mask: np.ndarray, token_ids: np.ndarray, tok_mask: np.ndarray, opt: nn.Adam) -> float:
        """One teacher-forced step: predict token t+1 at every real position."""
        cfg = self.config
        x, mask_add = self.core._assemble(visual, vis_mask, token_ids, tok_mask)
        x = self.core._blocks(x, mask_add)
        V = cfg.max_visual_tokens
        h = nn.index(x, (slice(None), slice(V, V + cfg.max_query_tokens - 1)))
        if cfg.n_layers > 0:
            h = nn.layer_norm(h, self.core.params["lnf_g"], self.core.params["lnf_b"])
        logits = nn.add(nn.matmul(h, self.core.params["w_lm"]), self.core.params["b_lm"])
        B = token_ids.shape[0]
        flat = nn.reshape(logits, (B * (cfg.max_query_tokens - 1), len(self.word_vocab)))
        targets = token_ids[:, 1:].reshape(-1)
        weights = tok_mask[:, 1:].reshape(-1)
        keep = np.flatnonzero(weights)
        loss = nn.cross_entropy(nn.index(flat, (keep,)), targets[keep])
        opt.zero_grad()
        loss.backward()
        opt.step()
        return float(loss.data)


def train_generative(
    model: GenerativeModel,
    dataset: Dataset,
    lr: float = 3e-4,
    batch_size: int = 32,
    epochs: int = 5,
    seed: int = 0,
) -> list[float]:
    """Teacher-forced training of the generative comparator on current-clip
    narrations; token sequences are the narration words plus EOS."""
    cfg = model.config
    wv = model.word_vocab
    items = []
    for stream in dataset.streams:
        for clip in stream.clips:
            toks = [wv.ids[w] for w in words_of(clip.text) if w in wv.ids] + [EOS]
            items.append((encode_clip(clip.frames).pooled, toks))
    opt = nn.Adam(model.core.params, lr=lr)
    rng = np.random.default_rng(seed)
    losses = []
    for _ in range(epochs):
        order = rng.permutation(len(items))
        total, nb = 0.0, 0
        for start in range(0, len(order), batch_size):
            chunk = [items[i] for i in order[start : start + batch_size]]
            B = len(chunk)
            visual = np.zeros((B, cfg.max_visual_tokens, cfg.d_embed))
            vis_mask = np.zeros((B, cfg.max_visual_tokens))
            ids = np.full((B, cfg.max_query_tokens), PAD, dtype=np.int64)
            tmask = np.zeros((B, cfg.max_query_tokens))
            for i, (pooled, toks) in enumerate(chunk):
                visual[i, -1] = pooled
                vis_mask[i, -1] = 1.0
                toks = toks[: cfg.max_query_tokens]
                ids[i, : len(toks)] = toks
                tmask[i, : len(toks)] = 1.0
            total += model.train_step(visual, vis_mask, ids, tmask, opt)
            nb += 1
        losses.append(total / max(nb, 1))
    return losses


# -- checkpoints (NVCK) ---------------------------------------------------

CKPT_MAGIC = b"NVCK"
CKPT_VERSION = 1


def save_checkpoint(model: GenRetModel, path: str | Path) -> None:
    """Named-tensor container: per tensor {name_len u16, name, rank u8,
    dims u32 x rank, f32 data LE}; the config (and word vocabulary) ride
    along as a JSON tensor named "__config__"."""
    path = Path(path)
    blob = json.dumps({"config": model.config.to_dict(), "words": model.word_vocab.words}).encode("utf-8")
    tensors: list[tuple[str, np.ndarray]] = [("__config__", np.frombuffer(blob, dtype=np.uint8).astype(np.float32))]
    tensors += [(k, p.data.astype(np.float32)) for k, p in sorted(model.params.items())]
    with path.open("wb") as f:
        f.write(CKPT_MAGIC)
        f.write(struct.pack("<II", CKPT_VERSION, len(tensors)))
        for name, arr in tensors:
            nb = name.encode("utf-8")
            f.write(struct.pack("<H", len(nb)))
            f.write(nb)
            f.write(struct.pack("<B", arr.ndim))
            f.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            f.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())


def load_checkpoint(path: str | Path) -> GenRetModel:
    path = Path(path)
    data = path.read_bytes()
    if data[:4] != CKPT_MAGIC:
        raise FormatError(f"bad checkpoint magic {data[:4]!r}")
    version, count = struct.unpack_from("<II", data, 4)
    if version != CKPT_VERSION:
        raise FormatError(f"unsupported checkpoint version {version}")
    off = 12
    tensors: dict[str, np.ndarray] = {}
    for _ in range(count):
        if off + 2 > len(data):
            raise FormatError("truncated checkpoint")
        (nlen,) = struct.unpack_from("<H", data, off)
        off += 2
        name = data[off : off + nlen].decode("utf-8")
        off += nlen
        (rank,) = struct.unpack_from("<B", data, off)
        off += 1
        dims = struct.unpack_from(f"<{rank}I", data, off)
        off += 4 * rank
        size = int(np.prod(dims)) if rank else 1
        end = off + 4 * size
        if end > len(data):
            raise FormatError("truncated checkpoint tensor data")
        tensors[name] = np.frombuffer(data[off:end], dtype="<f4").reshape(dims).copy()
        off = end
    if "__config__" not in tensors:
        raise FormatError("checkpoint missing __config__")
    meta = json.loads(tensors.pop("__config__").astype(np.uint8).tobytes().decode("utf-8"))
    config = ModelConfig(**meta["config"])
    model = GenRetModel(config, WordVocab(words=meta["words"]))
    for k, p in model.params.items():
        if k not in tensors:
            raise FormatError(f"checkpoint missing tensor {k}")
        if tensors[k].shape != p.data.shape:
            raise FormatError(f"tensor {k} has shape {tensors[k].shape}, expected {p.data.shape}")
        p.data = tensors[k].astype(config.dtype)
    return model
