"""Out-of-vocabulary detection and the agentic vocabulary-upgrade workflow.

When the prefix-stage top-1 score of a retrieval chain falls strictly
below the threshold, the clip is treated as a novel event: a scene
describer produces one sentence, a narration proposer expands it into
';'-separated candidate narrations, and the novel ones are merged into a
new vocabulary snapshot (old snapshots stay valid; ids never change).

Describer/proposer clients speak a one-request JSON protocol — either a
subprocess exchanging one line of {"prompt": ...} -> {"text": ...} or an
HTTP POST /complete with the same body — so any local or remote model can
fill either role.  Stub clients keyed by an oracle table back the tests.
"""

from __future__ import annotations

import json
import subprocess
import urllib.error
import urllib.request
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

import numpy as np

from . import index as index_mod
from . import vocab as vocab_mod
from .embed import EmbeddingMatrix, Encoder
from .errors import ClientProtocolError, ClientTimeout, ClientUnavailable
from .index import ChainResult, HierIndex
from .npe import normalize_text
from .vocab import Vocabulary


def _template(name: str) -> str:
    return resources.files("narravoc.templates").joinpath(name).read_text(encoding="utf-8")


def describer_prompt() -> str:
    return _template("describer.txt").rstrip("\n")


def proposer_prompt(scene_sentence: str) -> str:
    return _template("proposer.txt").replace("{scene}", scene_sentence)


@dataclass
class UpgradeConfig:
    threshold: float = 0.4
    max_new_per_event: int = 10
    scene_policy: str = "top1"  # "top1" | "global"
    timeout_s: float = 10.0

    def __post_init__(self):
        if not (-1.0 < self.threshold < 1.0):
            raise ValueError("threshold must be in (-1, 1)")


@dataclass
class UpgradeReport:
    trigger_score: float
    describer_sentence: str = ""
    raw_proposal: str = ""
    parsed: list[str] = field(default_factory=list)
    accepted: int = 0
    rejected: int = 0
    new_snapshot_id: str = ""
    retry: dict | None = None

    def to_dict(self) -> dict:
        return {
            "trigger_score": self.trigger_score,
            "describer_sentence": self.describer_sentence,
            "raw_proposal": self.raw_proposal,
            "parsed": self.parsed,
            "accepted": self.accepted,
            "rejected": self.rejected,
            "new_snapshot_id": self.new_snapshot_id,
            "retry": self.retry,
        }


def detect_oov(chain: ChainResult, cfg: UpgradeConfig) -> bool:
    """True iff the prefix-stage top-1 score falls strictly below threshold."""
    return chain.prefix.score < cfg.threshold


# -- clients --------------------------------------------------------------


class CompletionClient:
    """One prompt in, one text out."""

    def complete(self, prompt: str) -> str:
        raise NotImplementedError


class SubprocessClient(CompletionClient):
    """Spawns a command per request, writing one {"prompt": ...} line to its
    stdin and reading one {"text": ...} line from its stdout."""

    def __init__(self, argv: list[str], timeout_s: float = 10.0):
        self.argv = argv
        self.timeout_s = timeout_s

    def complete(self, prompt: str) -> str:
        try:
            proc = subprocess.run(
                self.argv,
                input=json.dumps({"prompt": prompt}) + "\n",
                capture_output=True,
                text=True,
                timeout=self.timeout_s,
            )
        except subprocess.TimeoutExpired as exc:
            raise ClientTimeout(f"no reply within {self.timeout_s}s") from exc
        except OSError as exc:
            raise ClientUnavailable(str(exc)) from exc
        if proc.returncode != 0:
            raise ClientUnavailable(f"client exited {proc.returncode}: {proc.stderr.strip()}")
        line = proc.stdout.strip().splitlines()
        if not line:
            raise ClientProtocolError("empty response")
        try:
            obj = json.loads(line[0])
            text = obj["text"]
        except (json.JSONDecodeError, KeyError, TypeError) as exc:
            raise ClientProtocolError(f"malformed response: {exc}") from exc
        if not isinstance(text, str) or not text.strip():
            raise ClientProtocolError("empty response")
        return text


class HttpClient(CompletionClient):
    """POST /complete with {"prompt": ...}, expecting {"text": ...}."""

    def __init__(self, base_url: str, timeout_s: float = 10.0):
        self.url = base_url.rstrip("/") + "/complete"
        self.timeout_s = timeout_s

    def complete(self, prompt: str) -> str:
        req = urllib.request.Request(
            self.url,
            data=json.dumps({"prompt": prompt}).encode("utf-8"),
            headers={"Content-Type": "application/json"},
        )
        try:
            with urllib.request.urlopen(req, timeout=self.timeout_s) as resp:
                if not (200 <= resp.status < 300):
                    raise ClientUnavailable(f"HTTP {resp.status}")
                body = resp.read().decode("utf-8")
        except TimeoutError as exc:
            raise ClientTimeout(f"no reply within {self.timeout_s}s") from exc
        except urllib.error.URLError as exc:
            raise ClientUnavailable(str(exc)) from exc
        try:
            text = json.loads(body)["text"]
        except (json.JSONDecodeError, KeyError, TypeError) as exc:
            raise ClientProtocolError(f"malformed response: {exc}") from exc
        if not isinstance(text, str) or not text.strip():
            raise ClientProtocolError("empty response")
        return text


class StubClient(CompletionClient):
    """Oracle-keyed stand-in: maps a key found in the prompt to a canned
    reply.  `table` maps lowercase keys (scene labels, phrases) to replies."""

    def __init__(self, table: dict[str, str], default: str = ""):
        self.table = {k.lower(): v for k, v in table.items()}
        self.default = default

    def complete(self, prompt: str) -> str:
        low = prompt.lower()
        best = None
        for key, reply in self.table.items():
            if key in low and (best is None or len(key) > len(best[0])):
                best = (key, reply)
        if best:
            return best[1]
        if self.default:
            return self.default
        raise ClientProtocolError("empty response")


def stub_describer_for_scene(scene_label: str) -> StubClient:
    return StubClient({}, default=f"a person works in the {scene_label}")


# -- workflow -------------------------------------------------------------


def describe_scene(client: CompletionClient, clip_hint: str = "") -> str:
    """One-sentence scene description; `clip_hint` lets stub clients key off
    the oracle scene while real clients ignore it."""
    prompt = describer_prompt()
    if clip_hint:
        prompt = f"{prompt}\n{clip_hint}"
    text = client.complete(prompt).strip()
    if not text:
        raise ClientProtocolError("empty response")
    return text.splitlines()[0]


def propose_narrations(client: CompletionClient, scene_sentence: str) -> str:
    """Raw proposer text for a scene sentence (template filled verbatim)."""
    return client.complete(proposer_prompt(scene_sentence))


def parse_proposals(raw: str, max_new: int | None = None) -> list[str]:
    """Split on ';', normalize like corpus narrations, dedupe in order."""
    out: list[str] = []
    seen: set[str] = set()
    for part in raw.split(";"):
        text = normalize_text(part)
        if not text or text in seen:
            continue
        seen.add(text)
        out.append(text)
        if max_new is not None and len(out) >= max_new:
            break
    return out


@dataclass
class Snapshot:
    """Vocabulary + matrices + index, swapped atomically on upgrade."""

    vocab: Vocabulary
    matrices: dict[str, EmbeddingMatrix]
    index: HierIndex

    @classmethod
    def build(cls, vocab: Vocabulary, matrices: dict[str, EmbeddingMatrix]) -> "Snapshot":
        idx = index_mod.build(vocab, matrices["scene"], matrices["prefix"], matrices["postfix"])
        return cls(vocab=vocab, matrices=matrices, index=idx)


def upgrade(
    snapshot: Snapshot,
    chain: ChainResult,
    describer: CompletionClient,
    proposer: CompletionClient,
    encoder: Encoder,
    cfg: UpgradeConfig,
    scene_query_emb: np.ndarray | None = None,
    prefix_query_emb: np.ndarray | None = None,
    clip_hint: str = "",
) -> tuple[Snapshot, UpgradeReport]:
    """Run describe -> propose -> parse -> merge for an OOV clip.

    Returns a new snapshot plus a report; on any client failure the
    exception propagates and the caller keeps using the old snapshot.  When
    the query embeddings are given, retrieval is retried against the new
    snapshot and the retry chain is included in the report.
    """
    report = UpgradeReport(trigger_score=chain.prefix.score)
    report.describer_sentence = describe_scene(describer, clip_hint=clip_hint)
    report.raw_proposal = propose_narrations(proposer, report.describer_sentence)
    report.parsed = parse_proposals(report.raw_proposal, cfg.max_new_per_event)

    if cfg.scene_policy == "global":
        scene_ids = list(snapshot.vocab.by_kind["scene"])
    else:
        scene_ids = [chain.scene.entry_id]
    existing = {snapshot.vocab.entries[i].text for i in snapshot.vocab.by_kind["prefix"]}
    novel = [t for t in report.parsed if t not in existing]
    report.accepted = len(novel)
    report.rejected = len(report.parsed) - len(novel)

    new_vocab = vocab_mod.merge(snapshot.vocab, [(t, "prefix", scene_ids) for t in novel])
    if novel:
        new_rows = np.stack([np.asarray(encoder(t), dtype=np.float32) for t in novel])
        prefix_rows = np.concatenate([snapshot.matrices["prefix"].rows, new_rows])
        new_matrices = dict(snapshot.matrices)
        new_matrices["prefix"] = EmbeddingMatrix(rows=prefix_rows, vocab_sha=snapshot.matrices["prefix"].vocab_sha)
    else:
        new_matrices = dict(snapshot.matrices)
    new_snapshot = Snapshot.build(new_vocab, new_matrices)
    report.new_snapshot_id = f"vocab-{len(new_vocab)}"

    if scene_query_emb is not None and prefix_query_emb is not None:
        retry = index_mod.retrieve_chain(
            scene_query_emb,
            lambda _sid: prefix_query_emb,
            lambda _text: prefix_query_emb,
            new_snapshot.index,
        )
        report.retry = retry.to_dict()
    return new_snapshot, report


def detect_and_upgrade(
    snapshot: Snapshot,
    chain: ChainResult,
    describer: CompletionClient,
    proposer: CompletionClient,
    encoder: Encoder,
    cfg: UpgradeConfig,
    **kwargs,
) -> tuple[Snapshot, UpgradeReport | None]:
    """Single-pass workflow: at most one upgrade per clip."""
    if not detect_oov(chain, cfg):
        return snapshot, None
    return upgrade(snapshot, chain, describer, proposer, encoder, cfg, **kwargs)
