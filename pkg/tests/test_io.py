import io
import json
import struct

import numpy as np
import pytest
from numpy.testing import assert_allclose, assert_array_equal

from finealign.core import TokenSet, l2_normalize, mean_pool
from finealign.errors import BadMagic, InvalidMask, TruncatedPayload, VersionUnsupported
from finealign.io import FLOW_RESCALE, dump_alignment, load_embeddings, write_embeddings
from finealign.strategies import KINDS, StrategyConfig, pair_flows, pair_similarity

from conftest import random_pair


def f32(a):
    return np.asarray(a, dtype=np.float32).astype(np.float64)


def random_items(rng, n=4, d=5):
    out = []
    for _ in range(n):
        L = int(rng.integers(1, 6))
        mask = rng.random(L) < 0.7
        mask[0] = True
        out.append(TokenSet(f32(rng.standard_normal((L, d))), f32(rng.standard_normal(d)), mask))
    return out


class TestEmbeddingFile:
    def test_round_trip(self, rng, tmp_path):
        items = random_items(rng)
        path = tmp_path / "e.alnf"
        write_embeddings(path, items)
        back = load_embeddings(path)
        assert len(back) == len(items)
        for a, b in zip(items, back):
            assert_array_equal(a.tokens, b.tokens)
            assert_array_equal(a.global_vector, b.global_vector)
            assert_array_equal(a.mask, b.mask)
            assert not b.global_derived

    def test_layout(self, tmp_path):
        path = tmp_path / "e.alnf"
        write_embeddings(path, [TokenSet(np.ones((2, 3)), np.ones(3))], with_global=False, with_mask=False)
        raw = path.read_bytes()
        assert raw[:4] == b"ALNF"
        assert struct.unpack_from("<II", raw, 4) == (1, 1)
        assert struct.unpack_from("<III", raw, 12) == (2, 3, 0)
        assert len(raw) == 24 + 4 * 6

    def test_missing_globals_derived(self, rng, tmp_path):
        items = random_items(rng)
        path = tmp_path / "e.alnf"
        write_embeddings(path, items, with_global=False)
        for a, b in zip(items, load_embeddings(path)):
            assert b.global_derived
            g = mean_pool(a.tokens[a.mask])
            assert_allclose(b.global_vector, g / np.linalg.norm(g), atol=1e-15)

    def test_derived_globals_not_written(self, rng, tmp_path):
        path = tmp_path / "e.alnf"
        write_embeddings(path, [TokenSet.from_tokens(f32(rng.standard_normal((3, 4))))])
        assert struct.unpack_from("<III", path.read_bytes(), 12)[2] == 2

    def test_truncated(self, rng, tmp_path):
        path = tmp_path / "e.alnf"
        write_embeddings(path, random_items(rng))
        raw = path.read_bytes()
        path.write_bytes(raw[:-1])
        with pytest.raises(TruncatedPayload):
            load_embeddings(path)
        path.write_bytes(raw + b"\0")
        with pytest.raises(TruncatedPayload):
            load_embeddings(path)
        path.write_bytes(raw[:7])
        with pytest.raises(TruncatedPayload):
            load_embeddings(path)

    def test_bad_magic(self, tmp_path):
        path = tmp_path / "e.alnf"
        path.write_bytes(b"NOPE" + struct.pack("<II", 1, 0))
        with pytest.raises(BadMagic):
            load_embeddings(path)

    def test_version(self, tmp_path):
        path = tmp_path / "e.alnf"
        path.write_bytes(b"ALNF" + struct.pack("<II", 2, 0))
        with pytest.raises(VersionUnsupported):
            load_embeddings(path)

    @pytest.mark.parametrize("mask", [b"\x02\x01", b"\x00\x00"])
    def test_invalid_mask(self, mask, tmp_path):
        path = tmp_path / "e.alnf"
        body = struct.pack("<III", 2, 1, 2) + struct.pack("<2f", 1.0, 2.0) + mask
        path.write_bytes(b"ALNF" + struct.pack("<II", 1, 1) + body)
        with pytest.raises(InvalidMask):
            load_embeddings(path)

    def test_empty_file_list(self, tmp_path):
        path = tmp_path / "e.alnf"
        write_embeddings(path, [])
        assert load_embeddings(path) == []


class TestDump:
    def test_single_token_lambda_zero(self, rng):
        mu, omega = random_pair(rng, l1=1, l2=1)
        dump = dump_alignment(mu, omega, StrategyConfig("tokenflow", lam=1e-300))
        d0 = float(mu.tokens[0] @ omega.global_vector)
        e0 = float(omega.tokens[0] @ mu.global_vector)
        assert_allclose(dump.flow_v2t, [[100 * d0]], atol=1e-13)
        assert_allclose(dump.flow_t2v, [[100 * e0]], atol=1e-13)

    @pytest.mark.parametrize("kind", [k for k in KINDS if k != "emd"])
    def test_reconciles(self, kind, rng):
        mu, omega = random_pair(rng)
        cfg = StrategyConfig(kind)
        dump = dump_alignment(mu, omega, cfg)
        p = pair_similarity(mu, omega, cfg)
        assert abs(dump.contributions_v2t.sum() / FLOW_RESCALE - p.s_fine_v) < 1e-9
        assert abs(dump.contributions_t2v.sum() / FLOW_RESCALE - p.s_fine_t) < 1e-9
        assert dump.s_v == pytest.approx(p.s_v, abs=1e-12) and dump.s_t == pytest.approx(p.s_t, abs=1e-12)
        flows = pair_flows(mu, omega, cfg)
        assert_array_equal(dump.flow_t2v, FLOW_RESCALE * flows.flow_t.t)

    def test_top_k(self, rng):
        mu, omega = random_pair(rng, l1=4, l2=5)
        dump = dump_alignment(mu, omega, StrategyConfig("scan"), top_k=3)
        contrib = dump.contributions_t2v
        s, t = np.unravel_index(np.argmax(contrib), contrib.shape)
        assert (dump.top_k[0]["s"], dump.top_k[0]["t"]) == (s, t)
        assert len(dump.top_k) == 3
        vals = [item["contribution"] for item in dump.top_k]
        assert vals == sorted(vals, reverse=True)

    def test_sinks(self, rng, tmp_path):
        mu, omega = random_pair(rng, l1=2, l2=3)
        buf = io.StringIO()
        dump_alignment(mu, omega, sink=buf, pair=(0, 1))
        doc = json.loads(buf.getvalue())
        assert doc["pair"] == [0, 1] and doc["rescale"] == 100.0
        assert np.array(doc["flow_v2t"]).shape == (2, 3)
        path = tmp_path / "dump.json"
        dump_alignment(mu, omega, sink=path)
        from_file = json.loads(path.read_text())
        assert from_file.pop("pair") is None
        doc.pop("pair")
        assert from_file == doc

    def test_normalized_inputs_roundtrip_file(self, rng, tmp_path):
        items = [l2_normalize(t) for t in random_items(rng, n=2)]
        path = tmp_path / "e.alnf"
        write_embeddings(path, items)
        back = [l2_normalize(t) for t in load_embeddings(path)]
        assert_allclose(back[0].valid_tokens, items[0].valid_tokens, atol=1e-6)
