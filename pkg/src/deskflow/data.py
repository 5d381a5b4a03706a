"""Dataset directories, byte-level BPE tokenizer and SFT example construction.

A dataset directory holds one or more ``.json`` files of the form::

    {"type": "text_only", "instances": [{"text": "..."}, ...]}
    {"type": "text2text", "instances": [{"input": "...", "output": "..."}, ...]}

Files are read in lexicographic filename order and must all share one type.
Trailing commas before ``}`` or ``]`` are tolerated.
"""

from __future__ import annotations

import json
import re
from collections import Counter
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

from .errors import ConflictError, DegenerateInputError, FormatError, LengthError

TEXT_ONLY = "text_only"
TEXT2TEXT = "text2text"
PREFERENCE = "preference"

INSTANCE_KEYS = {
    TEXT_ONLY: frozenset({"text"}),
    TEXT2TEXT: frozenset({"input", "output"}),
    PREFERENCE: frozenset({"prompt", "chosen", "rejected"}),
}


@dataclass(frozen=True)
class Dataset:
    kind: str
    instances: tuple[dict, ...]

    def __len__(self) -> int:
        return len(self.instances)

    def texts(self) -> list[str]:
        if self.kind != TEXT_ONLY:
            raise FormatError(f"dataset of type {self.kind!r} has no 'text' field")
        return [inst["text"] for inst in self.instances]

    def to_json(self) -> dict:
        return {"type": self.kind, "instances": [dict(inst) for inst in self.instances]}

    def save(self, directory: str | Path, filename: str = "data.json") -> Path:
        path = Path(directory)
        path.mkdir(parents=True, exist_ok=True)
        out = path / filename
        out.write_text(json.dumps(self.to_json(), ensure_ascii=False, indent=2), encoding="utf-8")
        return out


def text_only(texts: Iterable[str]) -> Dataset:
    return Dataset(TEXT_ONLY, tuple({"text": t} for t in texts))


def text2text(pairs: Iterable[tuple[str, str]]) -> Dataset:
    return Dataset(TEXT2TEXT, tuple({"input": i, "output": o} for i, o in pairs))


def _strip_trailing_commas(src: str) -> str:
    # commas are blanked, not removed, so decoder offsets still match the file
    out = list(src)
    in_str = escaped = False
    for i, ch in enumerate(src):
        if in_str:
            if escaped:
                escaped = False
            elif ch == "\\":
                escaped = True
            elif ch == '"':
                in_str = False
            continue
        if ch == '"':
            in_str = True
        elif ch == ",":
            j = i + 1
            while j < len(src) and src[j] in " \t\r\n":
                j += 1
            if j < len(src) and src[j] in "}]":
                out[i] = " "
    return "".join(out)


def _byte_offset(text: str, pos: int) -> int:
    return len(text[:pos].encode("utf-8"))


def parse_dataset_file(path: str | Path, allowed_types: Iterable[str] = (TEXT_ONLY, TEXT2TEXT)) -> tuple[str, list[dict]]:
    """Parse one dataset file and validate it against the instance contract."""
    path = Path(path)
    allowed = tuple(allowed_types)
    try:
        raw = path.read_bytes().decode("utf-8")
    except UnicodeDecodeError as exc:
        raise FormatError(f"{path.name}: not valid UTF-8 at byte {exc.start}") from exc
    text = _strip_trailing_commas(raw)
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise FormatError(f"{path.name}: invalid JSON at byte {_byte_offset(text, exc.pos)}: {exc.msg}") from exc
    start = len(text) - len(text.lstrip())
    where = f"{path.name} (object at byte {_byte_offset(text, start)})"
    if not isinstance(doc, dict):
        raise FormatError(f"{where}: top level must be an object")
    for key in ("type", "instances"):
        if key not in doc:
            raise FormatError(f"{where}: missing {key!r} key")
    extra = set(doc) - {"type", "instances"}
    if extra:
        raise FormatError(f"{where}: unexpected top-level keys {sorted(extra)}")
    kind = doc["type"]
    if kind not in allowed:
        raise FormatError(f"{where}: unsupported type {kind!r}; supported types are {list(allowed)}")
    instances = doc["instances"]
    if not isinstance(instances, list):
        raise FormatError(f"{where}: 'instances' must be a list")
    keys = INSTANCE_KEYS[kind]
    for i, inst in enumerate(instances):
        if not isinstance(inst, dict):
            raise FormatError(f"{path.name}: instance {i} is not an object")
        if set(inst) != keys:
            missing, unknown = sorted(keys - set(inst)), sorted(set(inst) - keys)
            raise FormatError(
                f"{path.name}: instance {i} has wrong keys for {kind!r} (missing {missing}, unknown {unknown})"
            )
        for k, v in inst.items():
            if not isinstance(v, str):
                raise FormatError(f"{path.name}: instance {i} field {k!r} must be a string")
    return kind, instances


def load_dataset(directory: str | Path, allowed_types: Iterable[str] = (TEXT_ONLY, TEXT2TEXT)) -> Dataset:
    """Load every ``.json`` file in ``directory`` as one dataset."""
    root = Path(directory)
    if not root.is_dir():
        raise FormatError(f"dataset directory {str(root)!r} does not exist")
    files = sorted(p for p in root.iterdir() if p.suffix == ".json" and p.is_file())
    if not files:
        raise FormatError(f"no .json files in {str(root)!r}")
    kind, first, instances = None, None, []
    for f in files:
        k, insts = parse_dataset_file(f, allowed_types)
        if kind is None:
            kind, first = k, f
        elif k != kind:
            raise FormatError(f"mixed dataset types: {first.name} is {kind!r} but {f.name} is {k!r}")
        instances.extend(insts)
    if not instances:
        raise FormatError(f"dataset in {str(root)!r} has no instances")
    return Dataset(kind, tuple(instances))


# ---------------------------------------------------------------- tokenizer

N_BYTES = 256
SPECIAL_NAMES = ("<bos>", "<eos>", "<pad>")
TOKENIZER_VERSION = 1


class Tokenizer:
    """Byte-level BPE with appended user tokens.

    Ids 0-255 are raw bytes, 256-258 are BOS/EOS/PAD, learned merges follow,
    and tokens added by :func:`extend_vocabulary` come last.  Added tokens
    are matched in input text (longest first) before byte encoding.
    """

    def __init__(self, pieces: Sequence[bytes], merges: Sequence[tuple[int, int]] = (), added: Sequence[int] = ()):
        self.pieces = list(pieces)
        self.merges = [tuple(m) for m in merges]
        self.added = list(added)
        self.bos, self.eos, self.pad = N_BYTES, N_BYTES + 1, N_BYTES + 2
        self._special = {self.bos, self.eos, self.pad}
        first_merge = N_BYTES + len(SPECIAL_NAMES)
        self._merge_rank = {pair: (rank, first_merge + rank) for rank, pair in enumerate(self.merges)}
        self._added_by_text = {self.pieces[i].decode("utf-8"): i for i in self.added}
        if self._added_by_text:
            alts = sorted(self._added_by_text, key=lambda s: (-len(s), s))
            self._added_re = re.compile("(" + "|".join(re.escape(a) for a in alts) + ")")
        else:
            self._added_re = None

    @classmethod
    def byte_level(cls) -> Tokenizer:
        return cls([bytes([b]) for b in range(N_BYTES)] + [s.encode() for s in SPECIAL_NAMES])

    def __len__(self) -> int:
        return len(self.pieces)

    @property
    def vocab(self) -> dict[str, int]:
        out, textual = {}, self._special | set(self.added)
        for i, p in enumerate(self.pieces):
            if i in textual:
                out[p.decode("utf-8")] = i
            else:
                out[p.decode("latin-1")] = i
        return out

    def _encode_plain(self, seg: str) -> list[int]:
        return self._merge_bytes(seg.encode("utf-8", errors="surrogateescape"))

    def _merge_bytes(self, raw: bytes) -> list[int]:
        ids = list(raw)
        ranks = self._merge_rank
        if not ranks:
            return ids
        while len(ids) > 1:
            best = None
            for pair in zip(ids, ids[1:]):
                r = ranks.get(pair)
                if r is not None and (best is None or r[0] < best[0]):
                    best = r
                    target = pair
            if best is None:
                break
            new_id = best[1]
            merged, i = [], 0
            while i < len(ids):
                if i + 1 < len(ids) and ids[i] == target[0] and ids[i + 1] == target[1]:
                    merged.append(new_id)
                    i += 2
                else:
                    merged.append(ids[i])
                    i += 1
            ids = merged
        return ids

    def encode(self, s: str) -> list[int]:
        if not s:
            return []
        if self._added_re is None:
            return self._encode_plain(s)
        ids: list[int] = []
        for part in self._added_re.split(s):
            if not part:
                continue
            tid = self._added_by_text.get(part)
            ids.extend([tid] if tid is not None else self._encode_plain(part))
        return ids

    def encode_bytes(self, raw: bytes) -> list[int]:
        """Encode arbitrary bytes; added tokens are not matched."""
        return self._merge_bytes(raw)

    def token_bytes(self, tid: int) -> bytes:
        return b"" if tid in self._special else self.pieces[tid]

    def decode_bytes(self, ids: Iterable[int]) -> bytes:
        return b"".join(self.token_bytes(int(i)) for i in ids)

    def decode(self, ids: Iterable[int]) -> str:
        return self.decode_bytes(ids).decode("utf-8", errors="replace")

    def to_json(self) -> dict:
        return {
            "version": TOKENIZER_VERSION,
            "vocab": [p.hex() for p in self.pieces],
            "merges": [list(m) for m in self.merges],
            "special": {"bos": self.bos, "eos": self.eos, "pad": self.pad},
            "added": list(self.added),
        }

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_json()), encoding="utf-8")

    @classmethod
    def from_json(cls, doc: dict) -> Tokenizer:
        if doc.get("version") != TOKENIZER_VERSION:
            raise FormatError(f"unsupported tokenizer version {doc.get('version')!r}")
        try:
            tok = cls([bytes.fromhex(h) for h in doc["vocab"]], [tuple(m) for m in doc["merges"]], doc.get("added", []))
        except (KeyError, ValueError, TypeError) as exc:
            raise FormatError(f"malformed tokenizer document: {exc}") from exc
        if doc.get("special") != {"bos": tok.bos, "eos": tok.eos, "pad": tok.pad}:
            raise FormatError("tokenizer special ids do not match this format")
        return tok

    @classmethod
    def load(cls, path: str | Path) -> Tokenizer:
        try:
            doc = json.loads(Path(path).read_text(encoding="utf-8"))
        except json.JSONDecodeError as exc:
            raise FormatError(f"{path}: invalid tokenizer JSON: {exc.msg}") from exc
        return cls.from_json(doc)

    def __eq__(self, other) -> bool:
        return isinstance(other, Tokenizer) and self.to_json() == other.to_json()


def train_bpe(corpus: Dataset, target_vocab: int) -> Tokenizer:
    """Greedy byte-pair merges by corpus frequency.

    Ties go to the pair that occurs first in the corpus, then to the
    lexicographically smaller byte pair.  Stops at ``target_vocab`` or when
    no adjacent pair occurs twice.
    """
    base = Tokenizer.byte_level()
    if target_vocab < len(base):
        raise DegenerateInputError(f"target_vocab must be at least {len(base)}")
    texts = corpus.texts()
    if not texts or not any(texts):
        raise DegenerateInputError("cannot train a tokenizer on an empty corpus")
    seqs = [list(t.encode("utf-8")) for t in texts]
    pieces = list(base.pieces)
    merges: list[tuple[int, int]] = []
    while len(pieces) < target_vocab:
        counts: Counter = Counter()
        first: dict[tuple[int, int], tuple[int, int]] = {}
        for si, seq in enumerate(seqs):
            for j, pair in enumerate(zip(seq, seq[1:])):
                counts[pair] += 1
                if pair not in first:
                    first[pair] = (si, j)
        if not counts:
            break
        pair = min(counts, key=lambda p: (-counts[p], first[p], pieces[p[0]] + pieces[p[1]]))
        if counts[pair] < 2:
            break
        new_id = len(pieces)
        pieces.append(pieces[pair[0]] + pieces[pair[1]])
        merges.append(pair)
        for si, seq in enumerate(seqs):
            out, i = [], 0
            while i < len(seq):
                if i + 1 < len(seq) and seq[i] == pair[0] and seq[i + 1] == pair[1]:
                    out.append(new_id)
                    i += 2
                else:
                    out.append(seq[i])
                    i += 1
            seqs[si] = out
    return Tokenizer(pieces, merges)


def extend_vocabulary(tok: Tokenizer, new_tokens: Sequence[str]) -> tuple[Tokenizer, int]:
    """Append ``new_tokens`` after the existing ids. Returns the new tokenizer and the count added."""
    existing = set(tok.pieces)
    seen, dupes = set(), []
    for t in new_tokens:
        b = t.encode("utf-8")
        if not t or b in existing or t in seen:
            dupes.append(t)
        seen.add(t)
    if dupes:
        raise ConflictError(f"tokens already in vocabulary: {dupes}")
    pieces = tok.pieces + [t.encode("utf-8") for t in new_tokens]
    added = tok.added + list(range(len(tok.pieces), len(pieces)))
    return Tokenizer(pieces, tok.merges, added), len(new_tokens)


# ---------------------------------------------------------------- examples


@dataclass(frozen=True)
class SftTemplate:
    prefix: str = "###Input:\n"
    infix: str = "\n###Output:\n"
    suffix: str = ""
    loss_on_input: bool = False

    def render_prompt(self, input_text: str) -> str:
        return f"{self.prefix}{input_text}{self.infix}"


def build_sft_example(
    tmpl: SftTemplate, inst: dict, tok: Tokenizer, max_len: int | None = None
) -> tuple[list[int], list[bool]]:
    """Token ids and loss mask for one input/output instance.

    The prompt and the answer are tokenized separately so the mask boundary
    falls on a token boundary.  Over-long examples lose tokens from the
    start of the prompt; the answer is never cut.
    """
    if not inst["output"]:
        raise DegenerateInputError("instance has an empty output")
    prompt = tok.encode(tmpl.render_prompt(inst["input"]))
    answer = tok.encode(inst["output"] + tmpl.suffix) + [tok.eos]
    if max_len is not None and len(prompt) + len(answer) > max_len:
        drop = len(prompt) + len(answer) - max_len
        if drop > len(prompt):
            raise LengthError(f"answer of {len(answer)} tokens exceeds the limit of {max_len}")
        prompt = prompt[drop:]
    return prompt + answer, [tmpl.loss_on_input] * len(prompt) + [True] * len(answer)


def build_text_example(inst: dict, tok: Tokenizer) -> tuple[list[int], list[bool]]:
    ids = tok.encode(inst["text"]) + [tok.eos]
    return ids, [True] * len(ids)
