"""Instruction-prompted autoregressive caption decoder.

The decoder consumes a spliced stream: <bos>, the fixed instruction
tokens, the bridged acoustic embeddings in the instruction's slot, the
instruction tail, then (at training time) the caption and <eos>. Loss is
masked to caption positions only. Word-level vocabulary; greedy and beam
decoding with deterministic tie-breaking.
"""

from __future__ import annotations

import math
import re
from dataclasses import dataclass, field

import numpy as np

from . import nn
from .nn import Linear, Module, Tensor, TransformerBlock


class EmptyCorpus(ValueError):
    pass


class SequenceTooLong(ValueError):
    pass


# Instruction template; the audio slot is replaced by bridged embeddings.
CAPTION_INSTRUCTION = "Describe the detail of this audio: <AcousticTokens> \n --- \n Detailed: "
ACOUSTIC_SLOT = "<AcousticTokens>"

SPECIAL_TOKENS = ("<bos>", "<eos>", "<pad>", "<unk>")
LITERAL_TOKENS = (":", "---", "\n")

_TOKEN_RE = re.compile(r"\n|---|:|[a-z0-9']+")


def tokenize(text: str) -> list[str]:
    """Lowercase and split into words [a-z0-9'] plus the literal tokens."""
    return _TOKEN_RE.findall(text.lower())


@dataclass
class Vocabulary:
    tokens: list[str]
    index: dict[str, int] = field(repr=False)

    BOS = 0
    EOS = 1
    PAD = 2
    UNK = 3

    def __len__(self) -> int:
        return len(self.tokens)

    def encode(self, text: str) -> list[int]:
        return [self.index.get(t, self.UNK) for t in tokenize(text)]

    def decode(self, ids) -> str:
        words = []
        for i in ids:
            if i in (self.BOS, self.EOS, self.PAD):
                continue
            words.append(self.tokens[i])
        return " ".join(words)

    @classmethod
    def from_tokens(cls, tokens: list[str]) -> "Vocabulary":
        if list(tokens[:4]) != list(SPECIAL_TOKENS):
            raise ValueError("special tokens must occupy ids 0-3")
        return cls(tokens=list(tokens), index={t: i for i, t in enumerate(tokens)})


def build_vocab(captions) -> Vocabulary:
    words: set[str] = set()
    n = 0
    for caption in captions:
        n += 1
        words.update(tokenize(caption))
    if n == 0:
        raise EmptyCorpus("no captions supplied")
    for part in CAPTION_INSTRUCTION.split(ACOUSTIC_SLOT):
        words.update(tokenize(part))  # instruction words must encode in-vocab
    words -= set(LITERAL_TOKENS)
    tokens = list(SPECIAL_TOKENS) + list(LITERAL_TOKENS) + sorted(words)
    return Vocabulary.from_tokens(tokens)


@dataclass
class DecoderConfig:
    d_dec: int = 128
    layers: int = 4
    heads: int = 4
    ffn_mult: int = 4
    max_seq: int = 512
    max_caption: int = 50

    def __post_init__(self):
        if self.d_dec % self.heads:
            raise ValueError("d_dec must be divisible by heads")


@dataclass
class SpliceSequence:
    """Decoder input: prompt head, acoustic block, prompt tail, caption."""

    prefix_ids: np.ndarray  # <bos> + instruction head, up to the slot
    acoustic: Tensor        # (L, d_dec) bridged embeddings
    suffix_ids: np.ndarray  # instruction tail after the slot
    caption_ids: np.ndarray  # caption + <eos>, empty at inference

    @property
    def length(self) -> int:
        return (len(self.prefix_ids) + self.acoustic.data.shape[0]
                + len(self.suffix_ids) + len(self.caption_ids))

    @property
    def ids(self) -> np.ndarray:
        """Target ids over the stream; acoustic slots hold <pad>."""
        acoustic_ids = np.full(self.acoustic.data.shape[0], Vocabulary.PAD,
                               dtype=np.int64)
        return np.concatenate([self.prefix_ids, acoustic_ids,
                               self.suffix_ids, self.caption_ids])

    @property
    def loss_mask(self) -> np.ndarray:
        """True exactly on caption ids and the trailing <eos>."""
        mask = np.zeros(self.length, dtype=bool)
        if len(self.caption_ids):
            mask[-len(self.caption_ids):] = True
        return mask


def assemble_sequence(acoustic: Tensor, caption: str | None, vocab: Vocabulary,
                      max_seq: int = 512) -> SpliceSequence:
    if acoustic.data.shape[0] == 0:
        raise ValueError("acoustic block is empty")
    head, tail = CAPTION_INSTRUCTION.split(ACOUSTIC_SLOT)
    prefix = np.array([vocab.BOS] + vocab.encode(head), dtype=np.int64)
    suffix = np.array(vocab.encode(tail), dtype=np.int64)
    if caption is None:
        caption_ids = np.zeros(0, dtype=np.int64)
    else:
        caption_ids = np.array(vocab.encode(caption) + [vocab.EOS], dtype=np.int64)
    seq = SpliceSequence(prefix, acoustic, suffix, caption_ids)
    if seq.length > max_seq:
        raise SequenceTooLong(f"spliced length {seq.length} exceeds {max_seq}")
    return seq


class CaptionDecoder(Module):
    def __init__(self, cfg: DecoderConfig, vocab_size: int,
                 rng: np.random.Generator, dtype=np.float32):
        self.embed = nn.parameter(
            rng.normal(0.0, 0.02, (vocab_size, cfg.d_dec)), dtype)
        self.pos = nn.parameter(
            rng.normal(0.0, 0.02, (cfg.max_seq, cfg.d_dec)), dtype)
        self.blocks = [TransformerBlock(cfg.d_dec, cfg.heads, cfg.ffn_mult,
                                        rng, dtype=dtype)
                       for _ in range(cfg.layers)]
        self.out_gain = nn.parameter(np.ones(cfg.d_dec), dtype)
        self.head = Linear(cfg.d_dec, vocab_size, rng, dtype=dtype)
        self.cfg = cfg
        self.dtype = dtype

    @property
    def vocab_size(self) -> int:
        return self.embed.data.shape[0]

    def embed_splice(self, s: SpliceSequence, pad_to: int | None = None) -> Tensor:
        segments = [nn.embedding(self.embed, s.prefix_ids), s.acoustic,
                    nn.embedding(self.embed, s.suffix_ids)]
        if len(s.caption_ids):
            segments.append(nn.embedding(self.embed, s.caption_ids))
        total = s.length
        if pad_to is not None and pad_to > total:
            pad_ids = np.full(pad_to - total, Vocabulary.PAD, dtype=np.int64)
            segments.append(nn.embedding(self.embed, pad_ids))
            total = pad_to
        x = nn.concat(segments, axis=0)
        return x + self.pos[:total]

    def logits(self, x: Tensor) -> Tensor:
        n = x.data.shape[-2]
        mask = nn.causal_mask(n, x.dtype)
        for block in self.blocks:
            x = block(x, mask=mask)
        return self.head(nn.rms_norm(x, self.out_gain))

    def forward_loss(self, splices: list[SpliceSequence]) -> Tensor:
        """Mean cross-entropy over all caption positions in the batch."""
        if not splices:
            raise nn.EmptyTargetSet("empty batch")
        t_max = max(s.length for s in splices)
        if t_max > self.cfg.max_seq:
            raise SequenceTooLong(f"batch length {t_max} exceeds {self.cfg.max_seq}")
        embs = [self.embed_splice(s, pad_to=t_max) for s in splices]
        ids = np.full((len(splices), t_max), Vocabulary.PAD, dtype=np.int64)
        keep = np.zeros((len(splices), t_max), dtype=bool)
        for i, s in enumerate(splices):
            ids[i, :s.length] = s.ids
            keep[i, :s.length] = s.loss_mask
        x = nn.stack(embs, axis=0)  # (B, T, d)
        logits = self.logits(x)
        shifted = logits[:, :-1, :]
        return nn.cross_entropy(shifted, ids[:, 1:], ignore_mask=~keep[:, 1:])

    def _step_logits(self, acoustic: Tensor, generated: list[int],
                     vocab: Vocabulary) -> np.ndarray:
        seq = assemble_sequence(acoustic, None, vocab, self.cfg.max_seq)
        seq = SpliceSequence(seq.prefix_ids, seq.acoustic, seq.suffix_ids,
                             np.array(generated, dtype=np.int64))
        if seq.length >= self.cfg.max_seq:
            raise SequenceTooLong(f"decode length {seq.length} hit the cap")
        x = self.embed_splice(seq)
        return self.logits(x).data[-1]

    def greedy_decode(self, acoustic: Tensor, vocab: Vocabulary,
                      max_caption: int | None = None) -> str:
        limit = max_caption if max_caption is not None else self.cfg.max_caption
        generated: list[int] = []
        for _ in range(limit):
            row = self._step_logits(acoustic, generated, vocab)
            tok = int(np.argmax(row))  # ties resolve to the lowest id
            if tok == vocab.EOS:
                break
            generated.append(tok)
        return vocab.decode(generated)

    def beam_decode(self, acoustic: Tensor, vocab: Vocabulary, beam: int = 4,
                    max_caption: int | None = None,
                    length_norm: float = 0.75) -> str:
        """Beam search over token ids.

        Hypothesis score is total log-prob divided by length**length_norm
        (length counts <eos>); ties break lexicographically on token ids,
        which makes beam=1 reproduce greedy decoding exactly.
        """
        if beam < 1:
            raise ValueError("beam width must be >= 1")
        limit = max_caption if max_caption is not None else self.cfg.max_caption
        live: list[tuple[list[int], float]] = [([], 0.0)]
        done: list[tuple[list[int], float]] = []

        def norm(total: float, length: int) -> float:
            return total / (max(length, 1) ** length_norm)

        for _ in range(limit):
            if not live:
                break
            candidates: list[tuple[float, list[int], float]] = []
            for ids, total in live:
                row = self._step_logits(acoustic, ids, vocab)
                m = row.max()
                logp = row - (m + math.log(np.exp(row - m).sum()))
                for tok in range(len(logp)):
                    t2 = total + float(logp[tok])
                    candidates.append((norm(t2, len(ids) + 1), ids + [tok], t2))
            candidates.sort(key=lambda c: (-c[0], c[1]))
            live = []
            for score, ids, total in candidates[:beam]:
                if ids[-1] == vocab.EOS:
                    done.append((ids, total))
                else:
                    live.append((ids, total))
        done.extend(live)  # length-capped hypotheses compete as-is
        best = min(done, key=lambda d: (-norm(d[1], len(d[0])), d[0]))
        return vocab.decode(best[0])
