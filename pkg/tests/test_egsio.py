import io

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from lfmmi.egsio import (ArkFormatError, EgsChunk, ScpEntry, chunk_starts, load_scp, make_egs,
                         read_egs, read_matrix_ark, read_matrix_value, read_scp, read_scp_matrix,
                         shard_and_shuffle, write_ark_scp, write_egs, write_matrix_ark, write_scp)
from lfmmi.graph import PhoneLm, write_wfsa
from oracles import accepted_sequences, accepts, ark_record

RECORD = bytes.fromhex("61 20 00 42 46 4D 20 04 01 00 00 00 04 01 00 00 00 00 00 00 00")


def to_bytes(records):
    buf = io.BytesIO()
    write_matrix_ark(records, buf)
    return buf.getvalue()


class TestArk:
    def test_exact_bytes(self):
        assert ark_record("a", [[0.0]]) == RECORD
        assert to_bytes([("a", np.zeros((1, 1)))]) == RECORD
        [(k, m)] = read_matrix_ark(RECORD)
        assert k == "a" and m.shape == (1, 1) and m[0, 0] == 0.0

    def test_matches_oracle(self):
        m = np.random.default_rng(0).standard_normal((3, 5)).astype(np.float32)
        assert to_bytes([("k1", m), ("k2", m[:0])]) == ark_record("k1", m) + ark_record("k2", m[:0])

    def test_empty_stream(self):
        assert list(read_matrix_ark(b"")) == []

    def test_truncated(self):
        data = to_bytes([("a", np.ones((2, 2)))])
        with pytest.raises(ArkFormatError, match="truncated matrix data at offset 17"):
            list(read_matrix_ark(data[:-3]))
        with pytest.raises(ArkFormatError, match="truncated"):
            list(read_matrix_ark(data[:9]))
        with pytest.raises(ArkFormatError, match="truncated key"):
            list(read_matrix_ark(data + b"b"))

    def test_bad_magic(self):
        with pytest.raises(ArkFormatError, match="bad matrix type"):
            list(read_matrix_ark(RECORD.replace(b"FM ", b"XM ")))
        with pytest.raises(ArkFormatError, match="bad binary marker"):
            list(read_matrix_ark(b"a \x01B"))

    def test_negative_dims(self):
        bad = RECORD[:8] + (-1).to_bytes(4, "little", signed=True) + RECORD[12:]
        with pytest.raises(ArkFormatError, match="negative dimension -1 at offset 7"):
            list(read_matrix_ark(bad))

    def test_double_records(self):
        m = np.arange(6, dtype="<f8").reshape(2, 3) / 7
        data = b"d \0BDM \x04" + (2).to_bytes(4, "little") + b"\x04" + (3).to_bytes(4, "little") + m.tobytes()
        [(k, back)] = read_matrix_ark(data)
        assert back.dtype == np.float64
        np.testing.assert_array_equal(back, m)

    def test_bad_key(self):
        with pytest.raises(ValueError):
            to_bytes([("a b", np.zeros((1, 1)))])

    @settings(max_examples=50, deadline=None)
    @given(st.lists(st.tuples(st.from_regex(r"[A-Za-z0-9_\-]{1,8}", fullmatch=True),
                              arrays(np.float32, st.tuples(st.integers(0, 5), st.integers(0, 5)),
                                     elements=st.floats(width=32, allow_nan=False))),
                    max_size=5))
    def test_roundtrip(self, records):
        data = to_bytes(records)
        back = list(read_matrix_ark(data))
        assert [k for k, _ in back] == [k for k, _ in records]
        for (_, a), (_, b) in zip(records, back):
            assert a.tobytes() == b.tobytes()
        assert to_bytes(back) == data


class TestScp:
    def test_parse(self):
        assert read_scp(["utt1 feats.ark:4\n"]) == [ScpEntry("utt1", "feats.ark", 4)]

    def test_missing_colon(self):
        with pytest.raises(ArkFormatError, match="line 2"):
            read_scp(["a x.ark:1", "b x.ark"])
        with pytest.raises(ArkFormatError, match="line 1"):
            read_scp(["a x.ark:z"])

    def test_random_access(self, tmp_path):
        rng = np.random.default_rng(0)
        recs = [(f"u{i}", rng.standard_normal((i + 1, 3)).astype(np.float32)) for i in range(6)]
        entries = write_ark_scp(recs, tmp_path / "f.ark", tmp_path / "f.scp")
        seq = dict(read_matrix_ark(tmp_path / "f.ark"))
        with open(tmp_path / "f.ark", "rb") as f:
            data = f.read()
        for e in reversed(entries):
            assert data[e.offset:e.offset + 2] == b"\0B"
            np.testing.assert_array_equal(read_scp_matrix(e), seq[e.key])
        assert read_scp(write_scp(entries).splitlines()) == entries
        loaded = load_scp(tmp_path / "f.scp")
        assert list(loaded) == [k for k, _ in recs]

    def test_relative_path(self, tmp_path):
        write_matrix_ark([("x", np.ones((1, 2)))], tmp_path / "a.ark")
        (tmp_path / "a.scp").write_text("x a.ark:2\n")
        np.testing.assert_array_equal(load_scp(tmp_path / "a.scp")["x"], [[1, 1]])

    def test_read_value_from_offset(self):
        f = io.BytesIO(RECORD)
        f.seek(2)
        assert read_matrix_value(f).shape == (1, 1)


class TestChunking:
    def test_exact_multiple(self):
        assert chunk_starts(280, 140) == [0, 140]

    def test_shifted(self):
        starts = chunk_starts(150, 140)
        assert starts == [0, 10]
        assert (starts[1], starts[1] + 139) == (10, 149)

    def test_too_short(self):
        with pytest.raises(ValueError, match="utterance too short"):
            chunk_starts(139, 140)

    @settings(max_examples=100, deadline=None)
    @given(st.integers(1, 50), st.integers(0, 300))
    def test_coverage(self, width, extra):
        T = width + extra
        starts = chunk_starts(T, width)
        covered = np.zeros(T, bool)
        for s in starts:
            assert 0 <= s <= T - width
            covered[s:s + width] = True
        assert covered.all()
        assert len(starts) == -(-T // width)


def utt(seed=0, T=150, phones=(0, 1, 2, 1)):
    rng = np.random.default_rng(seed)
    cuts = np.sort(rng.choice(np.arange(10, T - 10), len(phones) - 1, replace=False))
    ali = np.repeat(phones, np.diff(np.concatenate([[0], cuts, [T]])))
    return rng.standard_normal((T, 2)).astype(np.float32), list(phones), ali


class TestMakeEgs:
    def setup_method(self):
        self.lm = PhoneLm.uniform(3)

    def test_output_frames(self):
        feats, trans, ali = utt()
        egs = list(make_egs([("u", feats)], {"u": trans}, self.lm, 140, 2, 2, 3, {"u": ali}))
        assert [e.key for e in egs] == ["u-0", "u-10"]
        assert all(e.output_frames == 47 and e.input.shape == (144, 2) for e in egs)
        # edge frames replicated
        np.testing.assert_array_equal(egs[0].input[:2], feats[[0, 0]])
        np.testing.assert_array_equal(egs[1].input[-2:], feats[[-1, -1]])
        np.testing.assert_array_equal(egs[0].input[2:142], feats[:140])

    def test_supervision_matches_alignment(self):
        feats, trans, ali = utt(1)
        [e, _] = make_egs([("u", feats)], {"u": trans}, self.lm, 140, 0, 0, 3, {"u": ali})
        sub = tuple(int(p) for p in ali[0:140:3])
        assert len(sub) == 47
        assert accepts(e.supervision, sub)
        wrong = list(sub)
        wrong[0] = (wrong[0] + 1) % 3
        assert not accepts(e.supervision, wrong)

    def test_tolerance_constrains(self):
        feats, trans, ali = utt(2, T=60, phones=(0, 1))
        [loose] = make_egs([("u", feats)], {"u": trans}, self.lm, 60, 0, 0, 6, {"u": ali})
        [tight] = make_egs([("u", feats)], {"u": trans}, self.lm, 60, 0, 0, 6, {"u": ali}, tolerance=0)
        seqs = accepted_sequences(tight.supervision, 10)
        assert seqs == {tuple(int(p) for p in ali[::6])}
        assert len(accepted_sequences(loose.supervision, 10)) == 9

    def test_without_alignment(self):
        feats, trans, _ = utt(3, T=280)
        egs = list(make_egs([("u", feats)], {"u": trans}, self.lm, 140, 0, 0, 3))
        assert len(egs) == 2

    def test_bad_alignment(self):
        feats, trans, ali = utt(4)
        with pytest.raises(ValueError, match="alignment does not match"):
            list(make_egs([("u", feats)], {"u": [0, 1]}, self.lm, 140, 0, 0, 3, {"u": ali}))

    def test_egs_roundtrip(self):
        feats, trans, ali = utt(5)
        egs = list(make_egs([("u", feats)], {"u": trans}, self.lm, 140, 1, 1, 3, {"u": ali}))
        buf = io.BytesIO()
        assert write_egs(egs, buf) == 2
        back = list(read_egs(buf.getvalue()))
        for a, b in zip(egs, back):
            assert (a.key, a.chunk_width, a.output_frames) == (b.key, b.chunk_width, b.output_frames)
            assert a.input.tobytes() == b.input.tobytes()
            assert write_wfsa(a.supervision) == write_wfsa(b.supervision)
        with pytest.raises(ArkFormatError, match="bad egs header"):
            list(read_egs(b"x y\n"))


class TestShard:
    def test_one_job(self):
        assert [len(s) for s in shard_and_shuffle(range(10), 1)] == [10]

    def test_three_jobs(self):
        shards = shard_and_shuffle(range(10), 3, seed=1)
        assert sorted(len(s) for s in shards) == [3, 3, 4]
        assert sorted(x for s in shards for x in s) == list(range(10))

    def test_deterministic(self):
        assert shard_and_shuffle(range(20), 4, 9) == shard_and_shuffle(range(20), 4, 9)
        assert shard_and_shuffle(range(20), 4, 9) != shard_and_shuffle(range(20), 4, 10)
