"""Report text encoder: vocabulary, corruption tasks, and a small transformer.

The encoder is a bidirectional transformer trained from scratch with two
objectives: masked-token prediction (15% of non-special tokens replaced
by [MASK]) and paired-section prediction (a linear head on the [CLS]
feature decides whether the impression and findings sections belong to
the same subject).  Encoding is a deterministic forward pass; training
mutates parameters and must be single-writer.
"""

from __future__ import annotations

import math
import re
from dataclasses import dataclass, field
from typing import Iterable, Optional, Sequence

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import ConfigurationError, ValidationError
from .phantoms import ReportDocument

PAD, CLS, SEP, MASK, UNK = 0, 1, 2, 3, 4
SPECIAL_TOKENS = ("[PAD]", "[CLS]", "[SEP]", "[MASK]", "[UNK]")
MASK_FRACTION = 0.15

_WORD_RE = re.compile(r"[a-z0-9']+")


def _words(text: str) -> list[str]:
    return _WORD_RE.findall(text.lower())


@dataclass
class Vocabulary:
    """Frequency-ranked whitespace-word vocabulary with reserved specials."""

    id_to_word: list[str]
    word_to_id: dict[str, int]

    @property
    def size(self) -> int:
        return len(self.id_to_word)

    def encode_word(self, word: str) -> int:
        return self.word_to_id.get(word, UNK)


def build_vocab(corpus: Sequence[ReportDocument], vocab_size: int) -> Vocabulary:
    """Rank words by corpus frequency; ties break alphabetically."""
    if not corpus:
        raise ValidationError("cannot build a vocabulary from an empty corpus")
    if vocab_size < 10:
        raise ValidationError(f"vocab_size must be >= 10, got {vocab_size}")
    counts: dict[str, int] = {}
    for doc in corpus:
        for w in _words(doc.impression) + _words(doc.findings):
            counts[w] = counts.get(w, 0) + 1
    ranked = sorted(counts.items(), key=lambda kv: (-kv[1], kv[0]))
    id_to_word = list(SPECIAL_TOKENS)
    for w, _ in ranked[: vocab_size - len(SPECIAL_TOKENS)]:
        id_to_word.append(w)
    return Vocabulary(id_to_word, {w: i for i, w in enumerate(id_to_word)})


@dataclass
class TokenSequence:
    """[CLS] impression [SEP] findings [SEP], padded to max_len."""

    ids: np.ndarray
    length: int
    max_len: int

    def __post_init__(self) -> None:
        self.ids = np.asarray(self.ids, dtype=np.int64)
        if self.ids.shape != (self.max_len,):
            raise ValidationError("token ids must be padded to max_len")
        if int((self.ids == CLS).sum()) != 1 or self.ids[0] != CLS:
            raise ValidationError("sequence must contain exactly one [CLS], at position 0")

    def maskable_positions(self) -> np.ndarray:
        """Positions of real, non-special tokens."""
        region = self.ids[: self.length]
        special = (region == CLS) | (region == SEP) | (region == PAD) | (region == MASK)
        return np.flatnonzero(~special)


def tokenize(doc: ReportDocument, vocab: Vocabulary, max_len: int = 256) -> TokenSequence:
    """Build the two-section token sequence, truncating findings from the tail."""
    imp = _words(doc.impression)
    fin = _words(doc.findings)
    if not imp or not fin:
        raise ValidationError("both report sections must contain words")
    budget = max_len - 3 - len(imp)  # [CLS] + 2x [SEP]
    if budget < 1:
        raise ValidationError(
            f"impression alone ({len(imp)} words) exceeds max_len {max_len}"
        )
    fin = fin[:budget]
    ids = [CLS] + [vocab.encode_word(w) for w in imp] + [SEP] + [vocab.encode_word(w) for w in fin] + [SEP]
    length = len(ids)
    padded = np.full(max_len, PAD, dtype=np.int64)
    padded[:length] = ids
    return TokenSequence(padded, length, max_len)


def detokenize(seq: TokenSequence, vocab: Vocabulary) -> list[str]:
    """Words of the sequence, specials removed (in-vocab words round-trip)."""
    out = []
    for i in seq.ids[: seq.length]:
        if i >= len(SPECIAL_TOKENS):
            out.append(vocab.id_to_word[int(i)])
    return out


def mlm_corrupt(
    seq: TokenSequence, rng: np.random.Generator
) -> tuple[TokenSequence, dict[int, int]]:
    """Replace exactly round(15% of non-special tokens) with [MASK]."""
    positions = seq.maskable_positions()
    if positions.size == 0:
        raise ValidationError("sequence has no maskable tokens")
    n_mask = int(round(MASK_FRACTION * positions.size))
    chosen = rng.choice(positions, size=n_mask, replace=False) if n_mask else np.array([], dtype=int)
    ids = seq.ids.copy()
    targets = {int(p): int(ids[p]) for p in chosen}
    ids[list(targets.keys())] = MASK
    return TokenSequence(ids, seq.length, seq.max_len), targets


def pair_swap_batch(
    batch: Sequence[ReportDocument], rng: np.random.Generator
) -> tuple[list[ReportDocument], np.ndarray]:
    """Swap impressions within a random half of the batch (derangement).

    Returns the modified documents and labels with 1 = still paired.
    A batch of two is handled by swapping both items (labels 0, 0); label
    balance is restored in expectation across batches.
    """
    n = len(batch)
    if n < 2 or n % 2 != 0:
        raise ValidationError(f"pair task needs an even batch of >= 2, got {n}")
    k = max(n // 2, 2)
    subset = rng.choice(n, size=k, replace=False)
    # rotation over the shuffled subset: a derangement, so no self-swap
    perm = rng.permutation(subset)
    source = np.roll(perm, 1)
    out = list(batch)
    labels = np.ones(n, dtype=np.int64)
    for dst, src in zip(perm, source):
        out[dst] = ReportDocument(
            impression=batch[src].impression,
            findings=batch[dst].findings,
            subject_id=batch[dst].subject_id,
        )
        labels[dst] = 0
    return out, labels


@dataclass
class TextEncoderConfig:
    vocab_size: int = 512
    max_len: int = 256
    dim: int = 128
    n_layers: int = 4
    n_heads: int = 4
    ff_mult: int = 4


class EncoderBlock(nn.Module):
    """Pre-norm transformer block."""

    def __init__(self, dim: int, n_heads: int, ff_mult: int):
        super().__init__()
        self.norm1 = nn.LayerNorm(dim)
        self.attn = nn.MultiheadAttention(dim, n_heads, batch_first=True)
        self.norm2 = nn.LayerNorm(dim)
        self.ff = nn.Sequential(
            nn.Linear(dim, ff_mult * dim), nn.GELU(), nn.Linear(ff_mult * dim, dim)
        )

    def forward(self, x: torch.Tensor, pad_mask: torch.Tensor) -> torch.Tensor:
        h = self.norm1(x)
        attn, _ = self.attn(h, h, h, key_padding_mask=pad_mask, need_weights=False)
        x = x + attn
        return x + self.ff(self.norm2(x))


class TextEncoder(nn.Module):
    """Small bidirectional encoder with MLM and paired-section heads."""

    def __init__(self, config: TextEncoderConfig):
        super().__init__()
        self.config = config
        self.tok_emb = nn.Embedding(config.vocab_size, config.dim, padding_idx=PAD)
        self.pos_emb = nn.Embedding(config.max_len, config.dim)
        self.blocks = nn.ModuleList(
            EncoderBlock(config.dim, config.n_heads, config.ff_mult)
            for _ in range(config.n_layers)
        )
        self.final_norm = nn.LayerNorm(config.dim)
        self.mlm_head = nn.Linear(config.dim, config.vocab_size)
        self.pair_head = nn.Linear(config.dim, 1)

    def features(self, ids: torch.Tensor) -> torch.Tensor:
        """Per-token features, shape (B, L, dim); padding positions attend-masked."""
        if int(ids.max()) >= self.config.vocab_size:
            raise ValidationError("token id out of vocabulary range")
        pad_mask = ids == PAD
        pos = torch.arange(ids.shape[1], device=ids.device)
        x = self.tok_emb(ids) + self.pos_emb(pos)[None]
        for block in self.blocks:
            x = block(x, pad_mask)
        return self.final_norm(x)

    def forward(self, ids: torch.Tensor) -> dict[str, torch.Tensor]:
        feats = self.features(ids)
        return {
            "token_features": feats,
            "cls": feats[:, 0],
            "mlm_logits": self.mlm_head(feats),
            "pair_logit": self.pair_head(feats[:, 0]).squeeze(-1),
        }


@dataclass
class TextEmbedding:
    """Encoded report: per-token features (padding removed) and CLS vector."""

    token_features: np.ndarray  # (L, dim)
    cls: np.ndarray             # (dim,)


def encode(seq: TokenSequence, model: TextEncoder) -> TextEmbedding:
    """Deterministic forward pass on one sequence."""
    model.eval()
    with torch.no_grad():
        ids = torch.from_numpy(seq.ids[None])
        feats = model.features(ids)[0, : seq.length]
    arr = feats.numpy().astype(np.float32)
    return TextEmbedding(token_features=arr, cls=arr[0].copy())


def zero_text_embedding(dim: int, length: int = 4) -> TextEmbedding:
    """The prompt-free condition: an all-zero embedding."""
    return TextEmbedding(
        token_features=np.zeros((length, dim), dtype=np.float32),
        cls=np.zeros(dim, dtype=np.float32),
    )


def batch_losses(
    model: TextEncoder,
    docs: Sequence[ReportDocument],
    vocab: Vocabulary,
    rng: np.random.Generator,
    max_len: int,
) -> tuple[torch.Tensor, torch.Tensor, dict[str, float]]:
    """MLM cross-entropy + pair BCE for one document batch."""
    swapped, labels = pair_swap_batch(docs, rng)
    seqs, mlm_targets = [], []
    for doc in swapped:
        seq = tokenize(doc, vocab, max_len)
        corrupted, targets = mlm_corrupt(seq, rng)
        seqs.append(corrupted)
        mlm_targets.append(targets)
    batch_len = max(s.length for s in seqs)
    ids = torch.from_numpy(np.stack([s.ids[:batch_len] for s in seqs]))
    out = model(ids)

    target = torch.full(ids.shape, -100, dtype=torch.long)
    for i, targets in enumerate(mlm_targets):
        for pos, tok in targets.items():
            target[i, pos] = tok
    if (target != -100).any():
        mlm_loss = F.cross_entropy(
            out["mlm_logits"].reshape(-1, model.config.vocab_size),
            target.reshape(-1),
            ignore_index=-100,
        )
    else:
        mlm_loss = out["mlm_logits"].sum() * 0.0
    pair_loss = F.binary_cross_entropy_with_logits(
        out["pair_logit"], torch.from_numpy(labels).to(out["pair_logit"].dtype)
    )
    with torch.no_grad():
        masked = target.reshape(-1) != -100
        preds = out["mlm_logits"].reshape(-1, model.config.vocab_size).argmax(-1)
        acc = float((preds[masked] == target.reshape(-1)[masked]).float().mean())
        pair_acc = float(((out["pair_logit"] > 0).long().numpy() == labels).mean())
    return mlm_loss, pair_loss, {"mlm_acc": acc, "pair_acc": pair_acc}


@dataclass
class TextTrainConfig:
    steps: int = 2000
    batch_size: int = 16
    lr: float = 3e-4
    weight_decay: float = 0.01
    seed: int = 0


@dataclass
class TextCheckpoint:
    model: TextEncoder
    vocab: Vocabulary
    config: TextEncoderConfig
    history: list[dict[str, float]]
    step: int


def pretrain(
    corpus: Sequence[ReportDocument],
    enc_config: TextEncoderConfig,
    train_config: TextTrainConfig,
) -> TextCheckpoint:
    """Train the encoder on MLM + paired-section prediction."""
    if len(corpus) < 100:
        raise ValidationError(f"pretraining needs >= 100 documents, got {len(corpus)}")
    if train_config.batch_size % 2 != 0:
        raise ConfigurationError("batch size must be even for the pair task")
    vocab = build_vocab(corpus, enc_config.vocab_size)
    torch.manual_seed(train_config.seed)
    model = TextEncoder(enc_config)
    rng = np.random.default_rng(train_config.seed)
    opt = torch.optim.AdamW(
        model.parameters(), lr=train_config.lr, weight_decay=train_config.weight_decay
    )
    history: list[dict[str, float]] = []
    last_good: Optional[dict] = None
    step = 0
    for step in range(1, train_config.steps + 1):
        idx = rng.choice(len(corpus), size=train_config.batch_size, replace=False)
        docs = [corpus[i] for i in idx]
        model.train()
        mlm_loss, pair_loss, stats = batch_losses(model, docs, vocab, rng, enc_config.max_len)
        loss = mlm_loss + pair_loss
        if not torch.isfinite(loss):
            if last_good is None:
                raise RuntimeError("text pretraining diverged on the first step")
            model.load_state_dict(last_good)
            break
        opt.zero_grad()
        loss.backward()
        opt.step()
        history.append(
            {
                "step": step,
                "loss": float(loss),
                "mlm_loss": float(mlm_loss),
                "pair_loss": float(pair_loss),
                **stats,
            }
        )
        if step % 50 == 0:
            last_good = {k: v.detach().clone() for k, v in model.state_dict().items()}
    model.eval()
    return TextCheckpoint(model=model, vocab=vocab, config=enc_config, history=history, step=step)


def pair_scores(
    model: TextEncoder,
    docs: Sequence[ReportDocument],
    labels: np.ndarray,
    vocab: Vocabulary,
    max_len: int,
) -> np.ndarray:
    """Pair-head logits for already swapped/labelled documents."""
    model.eval()
    scores = []
    with torch.no_grad():
        for doc in docs:
            seq = tokenize(doc, vocab, max_len)
            ids = torch.from_numpy(seq.ids[None, : seq.length])
            scores.append(float(model(ids)["pair_logit"][0]))
    return np.asarray(scores)
