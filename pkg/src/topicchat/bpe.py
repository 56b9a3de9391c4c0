"""Byte-level BPE subword tokenizer.

The vocabulary starts from the 256 raw bytes, so every UTF-8 string is
encodable without unknown tokens. Reserved ids sit below the byte alphabet:
PAD, BOS, EOS, MASK, UNK, then one id per discrete latent value. Merges are
learned greedily by pair frequency with a deterministic lexicographic
tie-break, so training is reproducible byte-for-byte.

Encoding a dialogue yields four parallel id lists (token / role / turn /
position); truncation drops oldest whole turns first.
"""

from __future__ import annotations

from collections import Counter
from dataclasses import dataclass, field
from typing import Iterable, Sequence

PAD_ID = 0
BOS_ID = 1
EOS_ID = 2
MASK_ID = 3
UNK_ID = 4
LATENT_BASE = 5

BASE_SPECIALS = ["<pad>", "<bos>", "<eos>", "<mask>", "<unk>"]
ROLE_IDS = {"A": 0, "B": 1}

_BYTE_ALPHABET = 256


class TokenizerError(ValueError):
    pass


def latent_token_id(z: int) -> int:
    """Reserved token id carrying latent value ``z``."""
    return LATENT_BASE + z


def special_names(latent_count: int) -> list[str]:
    return BASE_SPECIALS + [f"<z{i}>" for i in range(latent_count)]


@dataclass
class EncodedSequence:
    """Four equal-length parallel id lists for one encoded dialogue."""

    token_ids: list[int] = field(default_factory=list)
    role_ids: list[int] = field(default_factory=list)
    turn_ids: list[int] = field(default_factory=list)
    position_ids: list[int] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.token_ids)


@dataclass
class Vocab:
    """Trained BPE vocabulary: reserved specials, byte alphabet, merges."""

    latent_count: int
    merges: list[tuple[int, int]]  # (left_id, right_id) in training order
    pieces: list[bytes]            # id -> byte content (specials hold their name)

    def __post_init__(self) -> None:
        self._ranks = {pair: self.special_count + _BYTE_ALPHABET + i
                       for i, pair in enumerate(self.merges)}

    @property
    def special_count(self) -> int:
        return len(BASE_SPECIALS) + self.latent_count

    @property
    def size(self) -> int:
        return len(self.pieces)

    @property
    def specials(self) -> list[str]:
        return special_names(self.latent_count)

    def is_special(self, token_id: int) -> bool:
        return token_id < self.special_count

    def encode_text(self, text: str) -> list[int]:
        """Byte-fallback BPE encoding of one utterance (no specials added)."""
        ids = [self.special_count + b for b in text.encode("utf-8")]
        while len(ids) >= 2:
            pairs = set(zip(ids, ids[1:]))
            best = min(
                (self._ranks[p] for p in pairs if p in self._ranks),
                default=None,
            )
            if best is None:
                break
            pair = self.merges[best - self.special_count - _BYTE_ALPHABET]
            ids = _merge(ids, pair, best)
        return ids


def _merge(ids: list[int], pair: tuple[int, int], new_id: int) -> list[int]:
    out: list[int] = []
    i = 0
    while i < len(ids):
        if i + 1 < len(ids) and ids[i] == pair[0] and ids[i + 1] == pair[1]:
            out.append(new_id)
            i += 2
        else:
            out.append(ids[i])
            i += 1
    return out


def train_bpe(
    corpus: Iterable[str],
    vocab_size: int,
    seed: int = 0,
    latent_count: int = 5,
) -> Vocab:
    """Learn a byte-level BPE vocabulary of at most ``vocab_size`` pieces.

    Merges are picked by descending pair frequency; ties break on the byte
    content of the (left, right) pieces. ``seed`` is accepted for interface
    symmetry but the procedure is fully deterministic. Candidate merges whose
    output bytes already exist as a piece are skipped, keeping the piece list
    duplicate-free.
    """
    special_count = len(BASE_SPECIALS) + latent_count
    floor = _BYTE_ALPHABET + special_count
    if vocab_size <= floor:
        raise TokenizerError(
            f"vocab_size {vocab_size} too small: need > {floor} "
            f"({_BYTE_ALPHABET} bytes + {special_count} specials)"
        )

    seq_freqs: Counter[tuple[int, ...]] = Counter()
    for text in corpus:
        ids = tuple(special_count + b for b in text.encode("utf-8"))
        if ids:
            seq_freqs[ids] += 1
    if not seq_freqs:
        raise TokenizerError("corpus is empty")

    pieces: list[bytes] = [name.encode("utf-8") for name in special_names(latent_count)]
    pieces += [bytes([b]) for b in range(_BYTE_ALPHABET)]
    known = set(pieces[special_count:])

    merges: list[tuple[int, int]] = []
    num_merges = vocab_size - floor
    for _ in range(num_merges):
        pair_freqs: Counter[tuple[int, int]] = Counter()
        for ids, freq in seq_freqs.items():
            for pair in zip(ids, ids[1:]):
                pair_freqs[pair] += freq
        candidates = [
            (pair, freq)
            for pair, freq in pair_freqs.items()
            if pieces[pair[0]] + pieces[pair[1]] not in known
        ]
        if not candidates:
            break
        pair, _freq = min(
            candidates,
            key=lambda it: (-it[1], pieces[it[0][0]], pieces[it[0][1]]),
        )
        new_id = len(pieces)
        merged = pieces[pair[0]] + pieces[pair[1]]
        pieces.append(merged)
        known.add(merged)
        merges.append(pair)
        seq_freqs = Counter(
            {tuple(_merge(list(ids), pair, new_id)): f for ids, f in seq_freqs.items()}
        )

    return Vocab(latent_count=latent_count, merges=merges, pieces=pieces)


def encode(
    vocab: Vocab,
    utterances: Sequence[tuple[str, str]],
    max_len: int | None = None,
) -> EncodedSequence:
    """Encode an ordered (role, text) dialogue into parallel id lists.

    Role ids follow the speaker tag, turn ids the relative utterance order,
    position ids run 0..L-1. When the result exceeds ``max_len``, whole turns
    are dropped oldest-first; a single turn that still exceeds the budget
    keeps only its newest tokens.
    """
    per_turn: list[tuple[int, list[int]]] = []
    for role, text in utterances:
        if role not in ROLE_IDS:
            raise TokenizerError(f"unknown role {role!r}")
        per_turn.append((ROLE_IDS[role], vocab.encode_text(text)))

    if max_len is not None:
        while len(per_turn) > 1 and sum(len(t) for _, t in per_turn) > max_len:
            per_turn.pop(0)
        if per_turn and len(per_turn[0][1]) > max_len:
            role_id, ids = per_turn[0]
            per_turn[0] = (role_id, ids[len(ids) - max_len:])

    enc = EncodedSequence()
    for turn_index, (role_id, ids) in enumerate(per_turn):
        enc.token_ids.extend(ids)
        enc.role_ids.extend([role_id] * len(ids))
        enc.turn_ids.extend([turn_index] * len(ids))
    enc.position_ids = list(range(len(enc.token_ids)))
    return enc


def decode(vocab: Vocab, token_ids: Sequence[int]) -> str:
    """Inverse of encoding: specials are stripped, bytes joined and decoded."""
    chunks: list[bytes] = []
    for tid in token_ids:
        if not 0 <= tid < vocab.size:
            raise TokenizerError(f"token id {tid} out of range for vocab of {vocab.size}")
        if vocab.is_special(tid):
            continue
        chunks.append(vocab.pieces[tid])
    return b"".join(chunks).decode("utf-8", errors="replace")


# --- vocab file manifest -----------------------------------------------------
#
# Text format: header line "bpe-v1 <piece count>", one piece per line
# (specials first, byte alphabet, then merged pieces), a "#merges" line, then
# one "left right" pair per line in training order. Piece bytes outside
# printable ASCII (plus backslash, space and "<") are escaped as \xHH.

_LITERAL = set(range(33, 127)) - {ord("\\"), ord("<")}


def _escape(piece: bytes) -> str:
    return "".join(chr(b) if b in _LITERAL else f"\\x{b:02x}" for b in piece)


def _unescape(text: str) -> bytes:
    out = bytearray()
    i = 0
    while i < len(text):
        if text[i] == "\\":
            if text[i + 1: i + 2] != "x" or len(text) < i + 4:
                raise TokenizerError(f"bad escape in piece {text!r}")
            out.append(int(text[i + 2: i + 4], 16))
            i += 4
        else:
            out.append(ord(text[i]))
            i += 1
    return bytes(out)


def save_vocab(vocab: Vocab, path: str) -> None:
    lines = [f"bpe-v1 {vocab.size}"]
    lines += vocab.specials
    lines += [_escape(p) for p in vocab.pieces[vocab.special_count:]]
    lines.append("#merges")
    lines += [
        f"{_escape(vocab.pieces[l])} {_escape(vocab.pieces[r])}"
        for l, r in vocab.merges
    ]
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("\n".join(lines) + "\n")


def load_vocab(path: str) -> Vocab:
    with open(path, "r", encoding="utf-8") as fh:
        lines = [ln.rstrip("\n") for ln in fh]
    if not lines or not lines[0].startswith("bpe-v1 "):
        raise TokenizerError(f"{path}: not a bpe-v1 vocab file")
    declared = int(lines[0].split()[1])

    try:
        sep = lines.index("#merges")
    except ValueError:
        raise TokenizerError(f"{path}: missing #merges section") from None

    piece_lines = lines[1:sep]
    latent_count = sum(1 for ln in piece_lines if ln.startswith("<z"))
    names = special_names(latent_count)
    if piece_lines[: len(names)] != names:
        raise TokenizerError(f"{path}: special token block malformed")

    special_count = len(names)
    pieces: list[bytes] = [n.encode("utf-8") for n in names]
    pieces += [_unescape(ln) for ln in piece_lines[special_count:]]
    if len(pieces) != declared:
        raise TokenizerError(f"{path}: header declares {declared} pieces, found {len(pieces)}")

    index = {p: i for i, p in enumerate(pieces[special_count:], start=special_count)}
    merges: list[tuple[int, int]] = []
    for ln in lines[sep + 1:]:
        if not ln:
            continue
        left_s, right_s = ln.split(" ")
        left, right = _unescape(left_s), _unescape(right_s)
        if left not in index or right not in index or left + right not in index:
            raise TokenizerError(f"{path}: merge {ln!r} references unknown piece")
        merges.append((index[left], index[right]))
    return Vocab(latent_count=latent_count, merges=merges, pieces=pieces)
