"""Decoder-only language model fusing byte-level text with audio tokens.

The base network (embeddings, attention and MLP weights, layer norms,
output head) is frozen at construction. Everything learned lives in two
places: low-rank adapter factors attached to every linear projection, and
the embedding/output rows added for audio tokens plus the two span
markers. The frozen parts are held as separate tensors and joined with
concat at forward time, so the text slice of the logits is computed by
the exact same arithmetic before and after vocabulary extension.

Audio tokens appear only inside bracketed spans: soa, audio ids, eoa.
Loss weighting is 10x on the whole span (markers included), 1x on text,
0 on instruction-prompt regions during fine-tuning.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field, replace

import numpy as np

from .nn import AdamW, LayerNorm, Module, attention
from .tensor import (
    DEFAULT_DTYPE,
    ShapeError,
    Tensor,
    concat,
    gelu,
    logsumexp,
    matmul,
    no_grad,
    scale,
    square,
    take_along_last,
    take_rows,
    tsum,
)

AUDIO_WEIGHT = 10.0
TEXT_WEIGHT = 1.0


# ----------------------------------------------------------------------
# vocabulary


@dataclass(frozen=True)
class Vocab:
    """Token id layout: [0, v_text) bytes, then n_audio audio ids, then
    the span markers soa and eoa."""

    v_text: int
    n_audio: int

    def __post_init__(self):
        if self.v_text < 1 or self.n_audio < 1:
            raise ValueError("Vocab needs at least one text and one audio token")

    @property
    def soa(self) -> int:
        return self.v_text + self.n_audio

    @property
    def eoa(self) -> int:
        return self.v_text + self.n_audio + 1

    @property
    def size(self) -> int:
        return self.v_text + self.n_audio + 2

    def audio_ids(self, codes) -> np.ndarray:
        codes = np.asarray(codes, dtype=np.int64)
        if codes.size and (codes.min() < 0 or codes.max() >= self.n_audio):
            raise ValueError(f"audio code outside [0, {self.n_audio})")
        return codes + self.v_text

    def codes_of(self, ids) -> np.ndarray:
        ids = np.asarray(ids, dtype=np.int64)
        if not np.all(self.is_audio(ids)):
            raise ValueError("codes_of: non-audio id present")
        return ids - self.v_text

    def is_audio(self, ids) -> np.ndarray:
        ids = np.asarray(ids)
        return (ids >= self.v_text) & (ids < self.v_text + self.n_audio)

    def encode_text(self, text: str) -> np.ndarray:
        raw = np.frombuffer(text.encode("utf-8"), dtype=np.uint8).astype(np.int64)
        if raw.size and raw.max() >= self.v_text:
            raise ValueError(f"byte value {raw.max()} outside text range [0, {self.v_text})")
        return raw

    def decode_text(self, ids) -> str:
        ids = np.asarray(ids, dtype=np.int64)
        if ids.size and (ids.min() < 0 or ids.max() >= self.v_text):
            raise ValueError("decode_text: non-text id present")
        return bytes(ids.astype(np.uint8)).decode("utf-8", errors="replace")


# ----------------------------------------------------------------------
# adapters and model


class LoraLinear(Module):
    """Frozen dense layer with a trainable low-rank delta.

    out = x W + b + (alpha/rank) (x A) B, where only A and B learn. B
    starts at zero, so a fresh adapter is an exact no-op.
    """

    def __init__(self, d_in: int, d_out: int, rank: int, alpha: float,
                 rng: np.random.Generator, dtype=DEFAULT_DTYPE):
        if rank < 1:
            raise ValueError(f"rank must be >= 1, got {rank}")
        self.weight = Tensor(rng.normal(0.0, d_in ** -0.5, size=(d_in, d_out)),
                             requires_grad=False, dtype=dtype)
        self.bias = Tensor(np.zeros(d_out), requires_grad=False, dtype=dtype)
        self.lora_a = Tensor(rng.normal(0.0, 0.02, size=(d_in, rank)),
                             requires_grad=True, dtype=dtype)
        self.lora_b = Tensor(np.zeros((rank, d_out)), requires_grad=True, dtype=dtype)
        self.scaling = alpha / rank

    def __call__(self, x: Tensor) -> Tensor:
        base = matmul(x, self.weight) + self.bias
        delta = scale(matmul(matmul(x, self.lora_a), self.lora_b), self.scaling)
        return base + delta


def _freeze_norm(norm: LayerNorm) -> LayerNorm:
    norm.gamma.requires_grad = False
    norm.beta.requires_grad = False
    return norm


class LoraBlock(Module):
    """Pre-norm transformer block with adapters on all four attention
    projections and both MLP layers; norms are frozen with the base."""

    def __init__(self, cfg: "FusionConfig", rng: np.random.Generator, dtype=DEFAULT_DTYPE):
        h = cfg.hidden_dim
        lora = dict(rank=cfg.lora_rank, alpha=cfg.lora_alpha, rng=rng, dtype=dtype)
        self.ln1 = _freeze_norm(LayerNorm(h, dtype=dtype))
        self.wq = LoraLinear(h, h, **lora)
        self.wk = LoraLinear(h, h, **lora)
        self.wv = LoraLinear(h, h, **lora)
        self.wo = LoraLinear(h, h, **lora)
        self.ln2 = _freeze_norm(LayerNorm(h, dtype=dtype))
        self.fc1 = LoraLinear(h, cfg.mlp_ratio * h, **lora)
        self.fc2 = LoraLinear(cfg.mlp_ratio * h, h, **lora)
        self.n_heads = cfg.n_heads

    def __call__(self, x: Tensor) -> Tensor:
        h = self.ln1(x)
        x = x + self.wo(attention(self.wq(h), self.wk(h), self.wv(h),
                                  self.n_heads, causal=True))
        return x + self.fc2(gelu(self.fc1(self.ln2(x))))


@dataclass
class FusionConfig:
    v_text: int = 256
    n_blocks: int = 4
    hidden_dim: int = 128
    head_dim: int = 32
    mlp_ratio: int = 4
    max_len: int = 512
    lora_rank: int = 8
    lora_alpha: float = 16.0

    def __post_init__(self):
        if self.hidden_dim % self.head_dim != 0:
            raise ShapeError(f"hidden {self.hidden_dim} not divisible by head {self.head_dim}")

    @property
    def n_heads(self) -> int:
        return self.hidden_dim // self.head_dim

    def with_paper_adapters(self) -> "FusionConfig":
        """Full-scale adapter hyperparameters on the current architecture."""
        return replace(self, lora_rank=64, lora_alpha=128.0)


class FusionLM(Module):
    def __init__(self, cfg: FusionConfig, rng: np.random.Generator | None = None,
                 dtype=DEFAULT_DTYPE):
        rng = np.random.default_rng(0) if rng is None else rng
        h = cfg.hidden_dim
        self.text_embed = Tensor(rng.normal(0.0, 0.02, size=(cfg.v_text, h)),
                                 requires_grad=False, dtype=dtype)
        self.pos = Tensor(rng.normal(0.0, 0.02, size=(cfg.max_len, h)),
                          requires_grad=False, dtype=dtype)
        self.blocks = [LoraBlock(cfg, rng, dtype=dtype) for _ in range(cfg.n_blocks)]
        self.ln_f = _freeze_norm(LayerNorm(h, dtype=dtype))
        self.out_base = Tensor(rng.normal(0.0, h ** -0.5, size=(h, cfg.v_text)),
                               requires_grad=False, dtype=dtype)
        self.audio_embed: Tensor | None = None
        self.out_ext: Tensor | None = None
        self.vocab: Vocab | None = None
        self.cfg = cfg
        self.dtype = dtype

    @property
    def vocab_size(self) -> int:
        return self.vocab.size if self.vocab is not None else self.cfg.v_text

    def __call__(self, ids) -> Tensor:
        ids = np.asarray(ids, dtype=np.int64)
        squeeze = ids.ndim == 1
        if squeeze:
            ids = ids[None, :]
        if ids.ndim != 2:
            raise ShapeError(f"FusionLM expects (T,) or (B, T) ids, got {ids.shape}")
        b, t = ids.shape
        if t > self.cfg.max_len:
            raise ShapeError(f"sequence length {t} exceeds max_len {self.cfg.max_len}")
        table = self.text_embed
        if self.audio_embed is not None:
            table = concat([self.text_embed, self.audio_embed], axis=0)
        x = take_rows(table, ids) + take_rows(self.pos, np.arange(t))
        for block in self.blocks:
            x = block(x)
        x = self.ln_f(x)
        logits = matmul(x, self.out_base)
        if self.out_ext is not None:
            logits = concat([logits, matmul(x, self.out_ext)], axis=-1)
        return logits.reshape(t, self.vocab_size) if squeeze else logits


def extend_vocab(model: FusionLM, n_audio: int, rng: np.random.Generator,
                 init_scale: float = 0.02) -> Vocab:
    """Grow the model by n_audio + 2 ids (audio block, soa, eoa). The new
    embedding and output rows are the only tensors added, and the only
    embedding tensors that learn."""
    if model.vocab is not None:
        raise ValueError("extend_vocab: model already extended")
    if n_audio < 1:
        raise ValueError(f"n_audio must be >= 1, got {n_audio}")
    h = model.cfg.hidden_dim
    extra = n_audio + 2
    model.audio_embed = Tensor(rng.normal(0.0, init_scale, size=(extra, h)),
                               requires_grad=True, dtype=model.dtype)
    model.out_ext = Tensor(rng.normal(0.0, init_scale, size=(h, extra)),
                           requires_grad=True, dtype=model.dtype)
    model.vocab = Vocab(v_text=model.cfg.v_text, n_audio=n_audio)
    return model.vocab


def frozen_digest(model: Module) -> str:
    """SHA-256 over every frozen tensor, in registry name order."""
    digest = hashlib.sha256()
    for name, t in model.named_tensors():
        if not t.requires_grad:
            digest.update(name.encode())
            digest.update(t.data.tobytes())
    return digest.hexdigest()


# ----------------------------------------------------------------------
# training examples


@dataclass
class FusionSequence:
    """Token ids with per-token target weights and an audio-span mask.

    weights[t] is the loss weight of x_t as a prediction target;
    weights[0] is never consumed (nothing predicts the first token).
    """

    ids: np.ndarray
    weights: np.ndarray
    audio_mask: np.ndarray
    stage: str

    def __len__(self) -> int:
        return self.ids.shape[0]


def _span(vocab: Vocab, codes) -> np.ndarray:
    return np.concatenate(([vocab.soa], vocab.audio_ids(codes), [vocab.eoa]))


def audio_spans_valid(ids, vocab: Vocab) -> tuple[bool, bool]:
    """(well-formed so far, span open at end). Well-formed means no nested
    soa, no stray eoa, and audio ids only between the markers."""
    open_span = False
    for token in np.asarray(ids, dtype=np.int64):
        if token == vocab.soa:
            if open_span:
                return False, open_span
            open_span = True
        elif token == vocab.eoa:
            if not open_span:
                return False, open_span
            open_span = False
        elif vocab.is_audio(token) and not open_span:
            return False, open_span
    return True, open_span


def build_pretrain_example(caption: str, audio_codes, vocab: Vocab,
                           rng: np.random.Generator) -> FusionSequence:
    """Caption and audio span in coin-flip order, text first on heads."""
    text = vocab.encode_text(caption)
    codes = np.asarray(audio_codes, dtype=np.int64)
    if text.size == 0:
        raise ValueError("build_pretrain_example: empty caption")
    if codes.size == 0:
        raise ValueError("build_pretrain_example: empty audio")
    span = _span(vocab, codes)
    text_weights = np.full(text.shape, TEXT_WEIGHT)
    span_weights = np.full(span.shape, AUDIO_WEIGHT)
    if rng.random() < 0.5:
        ids = np.concatenate([text, span])
        weights = np.concatenate([text_weights, span_weights])
        audio_mask = np.concatenate([np.zeros(text.size, bool), np.ones(span.size, bool)])
    else:
        ids = np.concatenate([span, text])
        weights = np.concatenate([span_weights, text_weights])
        audio_mask = np.concatenate([np.ones(span.size, bool), np.zeros(text.size, bool)])
    return FusionSequence(ids=ids, weights=weights, audio_mask=audio_mask, stage="pretrain")


def build_finetune_example(instruction: str, audio_codes, answer: str, vocab: Vocab,
                           answer_audio_codes=None) -> FusionSequence:
    """Instruction-following layout:

        USER: <soa>audio<eoa> {instruction} ASSISTANT: {answer}

    Everything through "ASSISTANT: " (trailing space included) carries
    zero loss weight; the answer carries standard weighting.
    """
    if not instruction:
        raise ValueError("build_finetune_example: empty instruction")
    if not answer:
        raise ValueError("build_finetune_example: empty answer")
    codes = np.asarray(audio_codes, dtype=np.int64)
    if codes.size == 0:
        raise ValueError("build_finetune_example: empty audio")
    prompt_parts = [
        (vocab.encode_text("USER: "), False),
        (_span(vocab, codes), True),
        (vocab.encode_text(" " + instruction + " ASSISTANT: "), False),
    ]
    answer_parts = [(vocab.encode_text(answer), False)]
    if answer_audio_codes is not None:
        answer_parts.append((_span(vocab, answer_audio_codes), True))

    ids, weights, audio_mask = [], [], []
    for part, is_audio in prompt_parts:
        ids.append(part)
        weights.append(np.zeros(part.size))
        audio_mask.append(np.full(part.size, is_audio))
    for part, is_audio in answer_parts:
        ids.append(part)
        weights.append(np.full(part.size, AUDIO_WEIGHT if is_audio else TEXT_WEIGHT))
        audio_mask.append(np.full(part.size, is_audio))
    return FusionSequence(ids=np.concatenate(ids),
                          weights=np.concatenate(weights),
                          audio_mask=np.concatenate(audio_mask).astype(bool),
                          stage="finetune")


# ----------------------------------------------------------------------
# loss


def weighted_ce_zloss(logits: Tensor, targets, weights, z_coeff: float = 1e-4,
                      valid_mask=None) -> tuple[Tensor, Tensor, Tensor]:
    """Weighted cross entropy plus z-loss on the partition function.

    loss  = sum_t w_t (logsumexp_t - logit_t[target_t]) / sum_t w_t
    zloss = z_coeff * mean over valid t of (logsumexp_t)^2

    valid_mask marks real positions in padded batches; it defaults to all
    valid and is independent of the loss weights (zero-weight prompt
    tokens are still valid positions).
    """
    targets = np.asarray(targets, dtype=np.int64)
    weights = np.asarray(weights, dtype=np.float64)
    if targets.shape != logits.shape[:-1]:
        raise ShapeError(f"targets shape {targets.shape} vs logits {logits.shape}")
    if weights.shape != targets.shape:
        raise ShapeError(f"weights shape {weights.shape} vs targets {targets.shape}")
    if valid_mask is None:
        valid_mask = np.ones(targets.shape, dtype=bool)
    else:
        valid_mask = np.asarray(valid_mask, dtype=bool)
        if valid_mask.shape != targets.shape:
            raise ShapeError(f"valid_mask shape {valid_mask.shape} vs targets {targets.shape}")
    weights = np.where(valid_mask, weights, 0.0)
    weight_sum = float(weights.sum())
    if weight_sum <= 0.0:
        raise ValueError("weighted_ce_zloss: weights sum to zero")
    n_valid = int(valid_mask.sum())

    lse = logsumexp(logits)
    ce = lse - take_along_last(logits, targets)
    w = Tensor(weights.astype(lse.dtype))
    loss = scale(tsum(ce * w), 1.0 / weight_sum)
    v = Tensor(valid_mask.astype(lse.dtype))
    zloss = scale(tsum(square(lse) * v), z_coeff / n_valid)
    return loss, zloss, loss + zloss


# ----------------------------------------------------------------------
# training


@dataclass
class LmTrainConfig:
    lr: float = 1e-3
    weight_decay: float = 0.01
    epochs: int = 10
    batch_size: int = 8
    z_coeff: float = 1e-4
    seed: int = 0


@dataclass
class LmTrainReport:
    epochs_run: int
    steps_run: int
    step_losses: list[float]
    final: dict[str, float]


def collate(examples: list[FusionSequence]):
    """Pad a batch to its longest sequence. Returns (inputs, targets,
    weights, valid): inputs are ids[:-1], targets ids[1:], both padded
    with zeros; valid marks real target positions."""
    if not examples:
        raise ValueError("collate: empty batch")
    width = max(len(e) for e in examples) - 1
    if width < 1:
        raise ValueError("collate: sequences must have at least 2 tokens")
    b = len(examples)
    inputs = np.zeros((b, width), dtype=np.int64)
    targets = np.zeros((b, width), dtype=np.int64)
    weights = np.zeros((b, width), dtype=np.float64)
    valid = np.zeros((b, width), dtype=bool)
    for i, example in enumerate(examples):
        n = len(example) - 1
        inputs[i, :n] = example.ids[:-1]
        targets[i, :n] = example.ids[1:]
        weights[i, :n] = example.weights[1:]
        valid[i, :n] = True
    return inputs, targets, weights, valid


def train_lm(examples: list[FusionSequence], model: FusionLM, cfg: LmTrainConfig,
             metrics=None, max_steps: int | None = None) -> LmTrainReport:
    if not examples:
        raise ValueError("train_lm: no examples")
    if model.vocab is None:
        raise ValueError("train_lm: extend_vocab must run before training")
    rng = np.random.default_rng(cfg.seed)
    opt = AdamW(model, lr=cfg.lr, weight_decay=cfg.weight_decay)
    step_losses: list[float] = []
    final: dict[str, float] = {}
    steps_run = 0
    epochs_run = 0
    stop = False
    for epoch in range(cfg.epochs):
        order = rng.permutation(len(examples))
        sums: dict[str, float] = {}
        n_batches = 0
        for start in range(0, len(order), cfg.batch_size):
            batch = [examples[i] for i in order[start:start + cfg.batch_size]]
            inputs, targets, weights, valid = collate(batch)
            logits = model(inputs)
            loss, zloss, total = weighted_ce_zloss(logits, targets, weights,
                                                   z_coeff=cfg.z_coeff, valid_mask=valid)
            opt.zero_grad()
            total.backward()
            opt.step()
            terms = {"ce": float(loss.data), "zloss": float(zloss.data),
                     "loss": float(total.data)}
            step_losses.append(terms["loss"])
            for key, value in terms.items():
                sums[key] = sums.get(key, 0.0) + value
            n_batches += 1
            steps_run += 1
            if max_steps is not None and steps_run >= max_steps:
                stop = True
                break
        if n_batches:
            final = {key: value / n_batches for key, value in sums.items()}
            if metrics is not None:
                for key, value in final.items():
                    metrics.add(steps_run, "train", key, value)
        epochs_run = epoch + 1
        if stop:
            break
    return LmTrainReport(epochs_run=epochs_run, steps_run=steps_run,
                         step_losses=step_losses, final=final)


def next_token_accuracy(model: FusionLM, examples: list[FusionSequence]) -> float:
    """Greedy accuracy over positions that carry loss weight."""
    hits = 0
    total = 0
    with no_grad():
        for example in examples:
            logits = model(example.ids[:-1]).data
            predictions = logits.argmax(axis=-1)
            mask = example.weights[1:] > 0
            hits += int((predictions[mask] == example.ids[1:][mask]).sum())
            total += int(mask.sum())
    if total == 0:
        raise ValueError("next_token_accuracy: no weighted positions")
    return hits / total


# ----------------------------------------------------------------------
# generation


@dataclass
class GenerationResult:
    tokens: np.ndarray
    generated: np.ndarray
    unclosed_audio: bool


def generate(model: FusionLM, prompt, max_new_tokens: int,
             rng: np.random.Generator | None = None, temperature: float = 1.0,
             top_k: int | None = None, constrain_audio: bool = True) -> GenerationResult:
    """Autoregressive sampling with optional audio-span masking.

    Inside an open span only audio ids and eoa can be sampled; outside,
    audio ids and eoa are masked off. temperature 0 decodes greedily.
    Hitting the length limit inside a span sets unclosed_audio.
    """
    if model.vocab is None:
        raise ValueError("generate: extend_vocab must run first")
    vocab = model.vocab
    ids = np.asarray(prompt, dtype=np.int64)
    if ids.ndim != 1 or ids.size == 0:
        raise ShapeError("generate: prompt must be a nonempty 1-D id sequence")
    if ids.min() < 0 or ids.max() >= vocab.size:
        raise ValueError(f"generate: prompt id outside [0, {vocab.size})")
    well_formed, open_span = audio_spans_valid(ids, vocab)
    if not well_formed:
        raise ValueError("generate: prompt violates the audio-span bracketing")
    rng = np.random.default_rng(0) if rng is None else rng

    audio_ids = np.arange(vocab.v_text, vocab.v_text + vocab.n_audio)
    out = list(ids)
    with no_grad():
        for _ in range(max_new_tokens):
            if len(out) >= model.cfg.max_len:
                break
            logits = model(np.asarray(out, dtype=np.int64)).data[-1].astype(np.float64)
            if constrain_audio:
                masked = np.full_like(logits, -np.inf)
                if open_span:
                    allowed = np.concatenate([audio_ids, [vocab.eoa]])
                else:
                    allowed = np.concatenate([np.arange(vocab.v_text), [vocab.soa]])
                masked[allowed] = logits[allowed]
                logits = masked
            if temperature <= 0.0:
                token = int(np.argmax(logits))
            else:
                scores = logits / temperature
                if top_k is not None and top_k >= 1:
                    keep = np.argsort(scores)[-top_k:]
                    pruned = np.full_like(scores, -np.inf)
                    pruned[keep] = scores[keep]
                    scores = pruned
                scores = scores - scores.max()
                probs = np.exp(scores)
                probs /= probs.sum()
                token = int(rng.choice(probs.size, p=probs))
            out.append(token)
            if token == vocab.soa:
                open_span = True
            elif token == vocab.eoa:
                open_span = False
    tokens = np.asarray(out, dtype=np.int64)
    return GenerationResult(tokens=tokens, generated=tokens[ids.size:],
                            unclosed_audio=open_span)
