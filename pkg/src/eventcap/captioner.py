"""Hierarchical caption generator.

A small controller LSTM rolls across a video's segments in ascending
end-time order, consuming the mean word embedding of the previous sentence
plus the video-level context descriptor, and hands its hidden state to a
two-layer sentence decoder.  Layer one is a standard LSTM over word
embeddings; layer two mixes that hidden state with the segment descriptor
and the controller state before the vocabulary projection.
"""

from __future__ import annotations

import re

import numpy as np

from . import autodiff as ad
from .autodiff import ContractError, Tensor

PAD, BOS, EOS, UNK = 0, 1, 2, 3
RESERVED = ("<pad>", "<bos>", "<eos>", "<unk>")

_SCRUB = re.compile(r"[^a-z0-9\s]")


def tokenize(text: str) -> list[str]:
    """Lowercase, strip punctuation, split on whitespace."""
    return _SCRUB.sub(" ", text.lower()).split()


class Vocabulary:
    """Token table with fixed reserved ids 0..3 (pad, bos, eos, unk)."""

    def __init__(self, tokens: list[str]):
        for t in tokens:
            if t in RESERVED:
                raise ContractError(f"reserved token {t!r} in vocabulary body")
        if len(set(tokens)) != len(tokens):
            raise ContractError("duplicate token in vocabulary")
        self.tokens = list(RESERVED) + list(tokens)
        self._ids = {t: i for i, t in enumerate(self.tokens)}

    def __len__(self):
        return len(self.tokens)

    @classmethod
    def build(cls, sentences: list[str], min_count: int = 1) -> "Vocabulary":
        counts: dict[str, int] = {}
        for sentence in sentences:
            for tok in tokenize(sentence):
                counts[tok] = counts.get(tok, 0) + 1
        return cls(sorted(t for t, c in counts.items() if c >= min_count))

    def encode(self, tokens: list[str]) -> list[int]:
        return [self._ids.get(t, UNK) for t in tokens]

    def decode(self, ids) -> list[str]:
        out = []
        for i in ids:
            if i == EOS:
                break
            if i not in (PAD, BOS):
                out.append(self.tokens[int(i)])
        return out

    def save(self, path) -> None:
        from .store import atomic_write
        atomic_write(path, ("\n".join(self.tokens[len(RESERVED):]) + "\n").encode("utf-8"))

    @classmethod
    def load(cls, path) -> "Vocabulary":
        with open(path, "r", encoding="utf-8") as fh:
            body = [line for line in fh.read().splitlines() if line]
        return cls(body)


def pad_caption(word_ids: list[int], max_len: int) -> list[int]:
    """Words followed by EOS, padded to max_len; rejects overlong captions."""
    if len(word_ids) + 1 > max_len:
        raise ContractError(f"caption of {len(word_ids)} words exceeds max length {max_len}")
    if PAD in word_ids or EOS in word_ids:
        raise ContractError("caption body may not contain pad or eos ids")
    return word_ids + [EOS] + [PAD] * (max_len - len(word_ids) - 1)


# ---------------------------------------------------------------------------
# parameters


def init_caption_params(vocab_size: int, embed_dim: int, fc_dim: int, ctrl_dim: int,
                        hidden: int, rng: np.random.Generator) -> dict[str, Tensor]:
    from .model import dense_init
    params: dict[str, Tensor] = {}
    params["cap/embed"] = Tensor(rng.uniform(-0.1, 0.1, size=(vocab_size, embed_dim)),
                                 requires_grad=True)

    def lstm(prefix, in_dim, out_dim):
        for gate in "fioc":
            w, b = dense_init(in_dim, out_dim, rng)
            if gate == "f":
                b.data[:] = 1.0  # start with an open forget gate
            params[f"{prefix}/{gate}/w"] = w
            params[f"{prefix}/{gate}/b"] = b

    lstm("ctrl", embed_dim + fc_dim + ctrl_dim, ctrl_dim)
    lstm("dec1", embed_dim + hidden, hidden)
    lstm("dec2", hidden + fc_dim + ctrl_dim + hidden, hidden)
    w, b = dense_init(hidden, vocab_size, rng)
    params["dec/logit/w"] = w
    params["dec/logit/b"] = b
    return params


def lstm_step(z: Tensor, c_prev: Tensor, prefix: str,
              params: dict[str, Tensor]) -> tuple[Tensor, Tensor]:
    """One LSTM step over the pre-concatenated input z; returns (h, c)."""
    f = ad.sigmoid(ad.linear(z, params[f"{prefix}/f/w"], params[f"{prefix}/f/b"]))
    i = ad.sigmoid(ad.linear(z, params[f"{prefix}/i/w"], params[f"{prefix}/i/b"]))
    o = ad.sigmoid(ad.linear(z, params[f"{prefix}/o/w"], params[f"{prefix}/o/b"]))
    c_tilde = ad.tanh(ad.linear(z, params[f"{prefix}/c/w"], params[f"{prefix}/c/b"]))
    c = ad.add(ad.mul(i, c_tilde), ad.mul(f, c_prev))
    return ad.mul(o, ad.tanh(c)), c


# ---------------------------------------------------------------------------
# sentence history encoding and the controller


def encode_sentence(token_ids, embed_table: Tensor) -> Tensor:
    """Mean embedding of the non-pad tokens, (1, D); zeros for an empty history."""
    ids = [int(i) for i in token_ids if int(i) != PAD]
    if not ids:
        return Tensor(np.zeros((1, embed_table.shape[1])))
    return ad.reshape(ad.mean(ad.embedding_lookup(embed_table, ids), axis=0), (1, -1))


def controller_step(prev_sentence: Tensor, context: Tensor, state: tuple[Tensor, Tensor],
                    params: dict[str, Tensor]) -> tuple[Tensor, Tensor]:
    """Advance the controller by one segment; state is (h, c), zeros at start."""
    h_prev, c_prev = state
    z = ad.concat([prev_sentence, context, h_prev], axis=1)
    return lstm_step(z, c_prev, "ctrl", params)


def zero_state(dim: int, batch: int = 1) -> tuple[Tensor, Tensor]:
    return Tensor(np.zeros((batch, dim))), Tensor(np.zeros((batch, dim)))


def controller_states(histories: list, context: Tensor,
                      params: dict[str, Tensor]) -> list[Tensor]:
    """Controller hidden state per segment of one video.

    ``histories[t]`` holds the padded token ids of the previous ground-truth
    caption (teacher forcing), or None for the first segment.
    """
    ctrl_dim = params["ctrl/f/b"].shape[0]
    state = zero_state(ctrl_dim)
    out = []
    for hist in histories:
        if hist is None:
            prev = Tensor(np.zeros((1, params["cap/embed"].shape[1])))
        else:
            prev = encode_sentence(hist, params["cap/embed"])
        state = controller_step(prev, context, state, params)
        out.append(state[0])
    return out


# ---------------------------------------------------------------------------
# decoder


def decode_step(word_ids, seg_feats: Tensor, ctrl_states: Tensor,
                state: tuple, params: dict[str, Tensor]):
    """One teacher-forced decoder step over a batch of segments.

    word_ids: (N,) input token ids; seg_feats (N, D_fc); ctrl_states (N, D_ctrl);
    state is ((h1, c1), (h2, c2)).  Returns (logits (N, V), new state).
    """
    (h1, c1), (h2, c2) = state
    x = ad.embedding_lookup(params["cap/embed"], word_ids)
    h1, c1 = lstm_step(ad.concat([x, h1], axis=1), c1, "dec1", params)
    z2 = ad.concat([h1, seg_feats, ctrl_states, h2], axis=1)
    h2, c2 = lstm_step(z2, c2, "dec2", params)
    logits = ad.linear(h2, params["dec/logit/w"], params["dec/logit/b"])
    return logits, ((h1, c1), (h2, c2))


def caption_loss(seg_feats: Tensor, ctrl_states: Tensor, captions: np.ndarray,
                 params: dict[str, Tensor]) -> Tensor:
    """Teacher-forced negative log-likelihood, normalized by max_len * batch.

    captions is an (N, K) int array of padded targets; inputs are the targets
    shifted right behind a BOS column.  Pad positions are masked out of the
    sum but K stays in the denominator.
    """
    captions = np.asarray(captions, dtype=np.int64)
    if captions.ndim != 2:
        raise ContractError("caption_loss expects an (N, K) caption batch")
    n, k = captions.shape
    if seg_feats.shape[0] != n or ctrl_states.shape[0] != n:
        raise ContractError("caption batch and feature batch sizes differ")
    hidden = params["dec1/f/b"].shape[0]
    state = (zero_state(hidden, n), zero_state(hidden, n))
    inputs = np.concatenate([np.full((n, 1), BOS, dtype=np.int64), captions[:, :-1]], axis=1)
    vocab = params["dec/logit/b"].shape[0]
    rows = np.arange(n, dtype=np.int64) * vocab
    picked = []
    for step in range(k):
        logits, state = decode_step(inputs[:, step], seg_feats, ctrl_states, state, params)
        logp = ad.log_softmax(logits, axis=1)
        chosen = ad.take(logp, rows + captions[:, step])
        mask = (captions[:, step] != PAD).astype(np.float64)
        picked.append(ad.mul(chosen, Tensor(mask)))
    total = ad.tensor_sum(ad.concat(picked, axis=0))
    return total * (-1.0 / (k * n))


def decode_greedy(seg_feats: list[Tensor], context: Tensor, params: dict[str, Tensor],
                  max_len: int, use_context: bool = True) -> list[list[int]]:
    """Greedily decode segments already sorted by ascending end time.

    Each segment's history is the previously *decoded* sentence.  Returns one
    id list (without pad) per segment, ending with EOS unless max_len is hit.
    """
    ctrl_dim = params["ctrl/f/b"].shape[0]
    embed_dim = params["cap/embed"].shape[1]
    hidden = params["dec1/f/b"].shape[0]
    ctrl = zero_state(ctrl_dim)
    prev = Tensor(np.zeros((1, embed_dim)))
    out = []
    for feat in seg_feats:
        if use_context:
            ctrl = controller_step(prev, context, ctrl, params)
            h_c = ctrl[0]
        else:
            h_c = Tensor(np.zeros((1, ctrl_dim)))
        state = (zero_state(hidden), zero_state(hidden))
        word = np.array([BOS], dtype=np.int64)
        ids: list[int] = []
        for _ in range(max_len):
            logits, state = decode_step(word, feat, h_c, state, params)
            nxt = int(np.argmax(logits.data[0]))  # first max wins ties
            ids.append(nxt)
            if nxt == EOS:
                break
            word = np.array([nxt], dtype=np.int64)
        out.append(ids)
        prev = encode_sentence(ids, params["cap/embed"])
    return out
