"""Typed vocabulary store: scene / prefix / postfix entries with dense ids
and a stable JSONL serialization.

Entry ids are dense over the whole store and append-only across merges, so
an embedding-matrix row index derived from an id never goes stale.  Matrix
alignment is per kind: the i-th entry of a kind (in ascending id order)
corresponds to row i of that kind's matrix.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

from .errors import FormatError, MissingScene
from .npe import EMPTY_POSTFIX, NpeResult

KINDS = ("scene", "prefix", "postfix")
ORIGINS = ("corpus", "upgrade")


@dataclass(frozen=True)
class VocabEntry:
    id: int
    text: str
    kind: str
    scene_ids: frozenset[int] = frozenset()
    origin: str = "corpus"

    def to_json(self) -> str:
        return json.dumps(
            {
                "id": self.id,
                "text": self.text,
                "kind": self.kind,
                "scene_ids": sorted(self.scene_ids),
                "origin": self.origin,
            },
            ensure_ascii=False,
        )


@dataclass
class Vocabulary:
    entries: list[VocabEntry]
    by_kind: dict[str, list[int]] = field(default_factory=dict)
    prefixes_by_scene: dict[int, list[int]] = field(default_factory=dict)

    def __post_init__(self):
        if not self.by_kind:
            self.by_kind = self._build_by_kind()
        if not self.prefixes_by_scene:
            self.prefixes_by_scene = self._build_prefixes_by_scene()

    def _build_by_kind(self) -> dict[str, list[int]]:
        by_kind: dict[str, list[int]] = {k: [] for k in KINDS}
        for e in self.entries:
            by_kind[e.kind].append(e.id)
        return by_kind

    def _build_prefixes_by_scene(self) -> dict[int, list[int]]:
        out: dict[int, list[int]] = {sid: [] for sid in self.by_kind.get("scene", [])}
        for e in self.entries:
            if e.kind == "prefix":
                for sid in sorted(e.scene_ids):
                    out.setdefault(sid, []).append(e.id)
        return out

    def __eq__(self, other) -> bool:
        return isinstance(other, Vocabulary) and self.entries == other.entries

    def __len__(self) -> int:
        return len(self.entries)

    def entry(self, entry_id: int) -> VocabEntry:
        return self.entries[entry_id]

    def kind_texts(self, kind: str) -> list[str]:
        return [self.entries[i].text for i in self.by_kind[kind]]

    def kind_index(self, kind: str, entry_id: int) -> int:
        """Row index of an entry within its kind's matrix."""
        return self.by_kind[kind].index(entry_id)

    def find(self, kind: str, text: str) -> VocabEntry | None:
        for i in self.by_kind[kind]:
            if self.entries[i].text == text:
                return self.entries[i]
        return None

    def validate(self) -> None:
        """Raise FormatError on any invariant violation."""
        scene_ids = set()
        texts_by_kind: dict[str, set[str]] = {k: set() for k in KINDS}
        for i, e in enumerate(self.entries):
            if e.id != i:
                raise FormatError(f"entry id {e.id} is not dense (expected {i})", line=i)
            if e.kind not in KINDS:
                raise FormatError(f"unknown kind {e.kind!r}", line=i)
            if e.origin not in ORIGINS:
                raise FormatError(f"unknown origin {e.origin!r}", line=i)
            if e.kind == "scene":
                scene_ids.add(e.id)
            if e.text in texts_by_kind[e.kind]:
                raise FormatError(f"duplicate text {e.text!r} within kind {e.kind}", line=i)
            texts_by_kind[e.kind].add(e.text)
            if e.kind == "prefix" and not e.scene_ids:
                raise FormatError(f"prefix entry {e.text!r} has no scene_ids", line=i)
            if e.kind != "prefix" and e.scene_ids:
                raise FormatError(f"{e.kind} entry {e.text!r} must not carry scene_ids", line=i)
            if not e.text and not (e.kind == "postfix"):
                raise FormatError("empty text outside the EMPTY postfix sentinel", line=i)
        for i, e in enumerate(self.entries):
            for sid in e.scene_ids:
                if sid not in scene_ids:
                    raise FormatError(f"scene_id {sid} does not reference a scene entry", line=i)
        post = self.by_kind["postfix"]
        if post and self.entries[post[0]].text != EMPTY_POSTFIX:
            raise FormatError("first postfix entry must be the EMPTY sentinel")
        for i in post[1:]:
            if not self.entries[i].text:
                raise FormatError("EMPTY postfix present more than once", line=i)

    @property
    def empty_postfix_id(self) -> int:
        return self.by_kind["postfix"][0]


def from_npe(npe: NpeResult, scene_of: dict[str, str | list[str]]) -> Vocabulary:
    """Build a vocabulary from an NPE result and per-narration scene labels.

    `scene_of` maps narration text (base or extension) to one scene label or
    a list of labels; a base prefix's scenes are the union over itself and
    all of its extensions.  Raises MissingScene if a prefix ends up with no
    scene label.
    """

    def labels_of(text: str) -> list[str]:
        v = scene_of.get(text)
        if v is None:
            return []
        return [v] if isinstance(v, str) else list(v)

    scene_labels: list[str] = []
    seen_scene: set[str] = set()
    prefix_scenes: dict[str, list[str]] = {p: list(labels_of(p)) for p in npe.prefixes}
    for ext, (base, _suffix) in npe.decomposition.items():
        for lab in labels_of(ext):
            prefix_scenes.setdefault(base, []).append(lab)
    for p in npe.prefixes:
        labs = prefix_scenes.get(p, [])
        if not labs:
            raise MissingScene(p)
        for lab in labs:
            if lab not in seen_scene:
                seen_scene.add(lab)
                scene_labels.append(lab)

    entries: list[VocabEntry] = []
    scene_id_of: dict[str, int] = {}
    for lab in scene_labels:
        scene_id_of[lab] = len(entries)
        entries.append(VocabEntry(id=len(entries), text=lab, kind="scene"))
    for p in npe.prefixes:
        sids = frozenset(scene_id_of[lab] for lab in prefix_scenes[p])
        entries.append(VocabEntry(id=len(entries), text=p, kind="prefix", scene_ids=sids))
    for s in npe.postfixes:
        entries.append(VocabEntry(id=len(entries), text=s, kind="postfix"))
    return Vocabulary(entries=entries)


def merge(v: Vocabulary, new_texts: list[tuple[str, str, list[int]]]) -> Vocabulary:
    """Return a new snapshot with (text, kind, scene_ids) triples appended.

    Existing (text, kind) pairs are no-ops except that prefix scene_ids are
    unioned.  Novel entries get fresh dense ids with origin="upgrade";
    existing ids and their order never change.
    """
    entries = list(v.entries)
    index: dict[tuple[str, str], int] = {(e.text, e.kind): e.id for e in entries}
    for text, kind, scene_ids in new_texts:
        if kind not in KINDS:
            raise FormatError(f"unknown kind {kind!r}")
        key = (text, kind)
        if key in index:
            eid = index[key]
            old = entries[eid]
            if kind == "prefix" and not set(scene_ids) <= old.scene_ids:
                entries[eid] = VocabEntry(
                    id=old.id,
                    text=old.text,
                    kind=old.kind,
                    scene_ids=old.scene_ids | frozenset(scene_ids),
                    origin=old.origin,
                )
            continue
        eid = len(entries)
        entries.append(
            VocabEntry(
                id=eid,
                text=text,
                kind=kind,
                scene_ids=frozenset(scene_ids) if kind == "prefix" else frozenset(),
                origin="upgrade",
            )
        )
        index[key] = eid
    return Vocabulary(entries=entries)


def save(v: Vocabulary, path: str | Path) -> None:
    """Write one JSON entry per line, ordered by id."""
    path = Path(path)
    with path.open("w", encoding="utf-8") as f:
        for e in v.entries:
            f.write(e.to_json() + "\n")


def load(path: str | Path) -> Vocabulary:
    """Read a JSONL vocabulary and validate all invariants."""
    path = Path(path)
    entries: list[VocabEntry] = []
    with path.open("r", encoding="utf-8") as f:
        for lineno, line in enumerate(f, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise FormatError(f"invalid JSON: {exc}", line=lineno) from exc
            try:
                entries.append(
                    VocabEntry(
                        id=int(obj["id"]),
                        text=str(obj["text"]),
                        kind=str(obj["kind"]),
                        scene_ids=frozenset(int(s) for s in obj.get("scene_ids", [])),
                        origin=str(obj.get("origin", "corpus")),
                    )
                )
            except (KeyError, TypeError, ValueError) as exc:
                raise FormatError(f"bad entry: {exc}", line=lineno) from exc
            if entries[-1].kind not in KINDS:
                raise FormatError(f"unknown kind {entries[-1].kind!r}", line=lineno)
    v = Vocabulary(entries=entries)
    v.validate()
    return v
