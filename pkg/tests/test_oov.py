import json
import sys

import numpy as np
import pytest

from narravoc import embed, index, oov
from narravoc.errors import ClientProtocolError, ClientTimeout, ClientUnavailable
from narravoc.index import ChainResult, RetrievalResult


def chain_with_prefix_score(score, scene_id=0, prefix_id=1):
    r = lambda eid, s: RetrievalResult(entry_id=eid, score=s, rank=0)
    return ChainResult(scene=r(scene_id, 1.0), prefix=r(prefix_id, score), postfix=r(2, 0.0), full_text="x")


def test_detect_threshold_is_strict():
    cfg = oov.UpgradeConfig(threshold=0.4)
    assert oov.detect_oov(chain_with_prefix_score(0.39), cfg)
    assert not oov.detect_oov(chain_with_prefix_score(0.4), cfg)  # equality does not fire
    assert not oov.detect_oov(chain_with_prefix_score(0.41), cfg)


def test_config_threshold_range():
    with pytest.raises(ValueError):
        oov.UpgradeConfig(threshold=1.0)


def test_prompt_templates():
    d = oov.describer_prompt()
    assert "overall activity" in d
    p = oov.proposer_prompt("a person cuts a mango in the kitchen")
    assert "a person cuts a mango in the kitchen" in p
    assert "{scene}" not in p
    # the two in-context examples survive verbatim
    assert "Slice mango" in p
    assert "Knit scarf" in p


def test_parse_proposals():
    raw = "Cut a mango; cut  a mango ; Hold knife;; wash hands"
    assert oov.parse_proposals(raw) == ["cut a mango", "hold knife", "wash hands"]
    assert oov.parse_proposals(raw, max_new=2) == ["cut a mango", "hold knife"]


def test_stub_client_longest_key():
    c = oov.StubClient({"kitchen": "short", "in the kitchen": "long"}, default="d")
    assert c.complete("someone in the kitchen") == "long"
    assert c.complete("nothing matches") == "d"
    with pytest.raises(ClientProtocolError):
        oov.StubClient({}).complete("x")


def test_describe_scene_uses_hint():
    client = oov.StubClient({"garden": "a person works in the garden"})
    assert oov.describe_scene(client, clip_hint="garden") == "a person works in the garden"


def _subprocess_client(script):
    return oov.SubprocessClient([sys.executable, "-c", script], timeout_s=5.0)


def test_subprocess_client_protocol():
    script = (
        "import sys, json\n"
        "req = json.loads(sys.stdin.readline())\n"
        "print(json.dumps({'text': 'echo: ' + req['prompt']}))\n"
    )
    assert _subprocess_client(script).complete("hi") == "echo: hi"


def test_subprocess_client_errors():
    with pytest.raises(ClientUnavailable):
        oov.SubprocessClient(["/nonexistent-binary"]).complete("x")
    with pytest.raises(ClientUnavailable):
        _subprocess_client("import sys; sys.exit(3)").complete("x")
    with pytest.raises(ClientProtocolError):
        _subprocess_client("print('not json')").complete("x")
    with pytest.raises(ClientProtocolError):
        _subprocess_client("import json; print(json.dumps({'text': ''}))").complete("x")
    with pytest.raises(ClientTimeout):
        oov.SubprocessClient([sys.executable, "-c", "import time; time.sleep(5)"], timeout_s=0.2).complete("x")


@pytest.fixture()
def snapshot(tiny_dataset, tiny_matrices):
    return oov.Snapshot.build(tiny_dataset.world.vocabulary, dict(tiny_matrices))


def run_chain(snapshot, q_scene, q):
    return index.retrieve_chain(q_scene, lambda sid: q, lambda text: q, snapshot.index)


def test_upgrade_adds_novel_and_retries(snapshot, tiny_dataset):
    dim = tiny_dataset.world.spec.dim
    vocab = snapshot.vocab
    scene_label = vocab.entries[snapshot.index.scene_ids[0]].text
    novel_text = "juggle a torch"
    assert vocab.find("prefix", novel_text) is None
    q = embed.stub_encode_text(novel_text, dim)
    q_scene = embed.stub_encode_text(scene_label, dim)
    chain = run_chain(snapshot, q_scene, q)
    describer = oov.StubClient({}, default=f"a person works in the {scene_label}")
    proposer = oov.StubClient({}, default=f"{novel_text}; {vocab.kind_texts('prefix')[0]}")
    cfg = oov.UpgradeConfig(threshold=0.99)
    new_snap, report = oov.detect_and_upgrade(
        snapshot, chain, describer, proposer, embed.make_stub_encoder(dim), cfg,
        scene_query_emb=q_scene, prefix_query_emb=q,
    )
    assert report is not None
    assert report.accepted == 1 and report.rejected == 1
    entry = new_snap.vocab.find("prefix", novel_text)
    assert entry is not None and entry.origin == "upgrade"
    assert chain.scene.entry_id in entry.scene_ids
    assert report.retry is not None
    assert report.retry["prefix"]["entry_id"] == entry.id
    assert report.retry["prefix"]["score"] > 0.99
    # old snapshot untouched
    assert snapshot.vocab.find("prefix", novel_text) is None
    assert snapshot.matrices["prefix"].rows.shape[0] + 1 == new_snap.matrices["prefix"].rows.shape[0]


def test_upgrade_existing_proposals_are_noops(snapshot, tiny_dataset):
    dim = tiny_dataset.world.spec.dim
    vocab = snapshot.vocab
    scene_label = vocab.entries[snapshot.index.scene_ids[0]].text
    existing = vocab.kind_texts("prefix")[:3]
    q = embed.stub_encode_text("something odd", dim)
    chain = run_chain(snapshot, embed.stub_encode_text(scene_label, dim), q)
    describer = oov.StubClient({}, default="a scene")
    proposer = oov.StubClient({}, default="; ".join(existing))
    new_snap, report = oov.upgrade(
        snapshot, chain, describer, proposer, embed.make_stub_encoder(dim), oov.UpgradeConfig()
    )
    assert report.accepted == 0
    assert len(new_snap.vocab.entries) == len(vocab.entries)


def test_in_vocab_clip_does_not_trigger(snapshot, tiny_dataset):
    dim = tiny_dataset.world.spec.dim
    vocab = snapshot.vocab
    text = vocab.kind_texts("prefix")[0]
    entry = vocab.find("prefix", text)
    scene_label = vocab.entries[min(entry.scene_ids)].text
    q = embed.stub_encode_text(text, dim)
    chain = run_chain(snapshot, embed.stub_encode_text(scene_label, dim), q)
    assert chain.prefix.score > 0.99
    new_snap, report = oov.detect_and_upgrade(
        snapshot, chain,
        oov.StubClient({}, default="x"), oov.StubClient({}, default="y z"),
        embed.make_stub_encoder(dim), oov.UpgradeConfig(),
    )
    assert report is None
    assert new_snap is snapshot


def test_client_failure_leaves_snapshot_usable(snapshot, tiny_dataset):
    dim = tiny_dataset.world.spec.dim
    n0 = len(snapshot.vocab.entries)
    chain = run_chain(snapshot, embed.stub_encode_text("x", dim), embed.stub_encode_text("y", dim))
    with pytest.raises(ClientUnavailable):
        oov.upgrade(
            snapshot, chain, oov.SubprocessClient(["/nonexistent-binary"]), oov.StubClient({}, default="a"),
            embed.make_stub_encoder(dim), oov.UpgradeConfig(),
        )
    assert len(snapshot.vocab.entries) == n0
