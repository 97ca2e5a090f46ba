import numpy as np
import pytest

from protohead.dataio import (
    Checkpoint,
    EmbeddingBundle,
    load_checkpoint,
    read_bundle,
    save_checkpoint,
    write_bundle,
)
from protohead.errors import (
    BadMagic,
    InvariantViolation,
    IoFailure,
    NonFiniteValue,
    ShapeMismatch,
    TruncatedFile,
    VersionMismatch,
)


def make_bundle(
    samples=3, grid=(2, 2), dim=3, views=1, classes=2, cats=2, seed=0
) -> EmbeddingBundle:
    rng = np.random.default_rng(seed)
    gh, gw = grid
    patches = gh * gw
    return EmbeddingBundle(
        grid_h=gh,
        grid_w=gw,
        embed_dim=dim,
        num_views=views,
        num_classes=classes,
        num_part_categories=cats,
        labels=rng.integers(0, classes, samples).astype(np.uint32),
        embeddings=rng.normal(size=(samples, views, patches, dim)).astype(np.float32),
        rects=np.tile(
            np.asarray([0.0, 0.0, 1.0, 1.0], dtype=np.float32), (samples, views, 1)
        ),
        part_ids=rng.integers(0, cats + 1, (samples, patches)).astype(np.uint16),
    )


def layout_size(samples, gh, gw, dim, views):
    """Independent byte-count oracle for the wire format."""
    header = 4 + 8 * 4
    per_view = 4 * 4 + gh * gw * dim * 4
    per_sample = 4 + views * per_view + gh * gw * 2
    return header + samples * per_sample


class TestBundleFormat:
    def test_empty_bundle_is_36_bytes(self, tmp_path):
        b = make_bundle(samples=0)
        path = tmp_path / "empty.peb"
        write_bundle(b, path)
        assert path.stat().st_size == 36

    def test_documented_size_example(self, tmp_path):
        b = make_bundle(samples=1, grid=(2, 2), dim=3, views=1)
        path = tmp_path / "one.peb"
        write_bundle(b, path)
        assert path.stat().st_size == 112
        assert path.stat().st_size == layout_size(1, 2, 2, 3, 1)

    def test_size_oracle_random_configs(self, tmp_path):
        rng = np.random.default_rng(7)
        for _ in range(5):
            s = int(rng.integers(0, 4))
            gh, gw = int(rng.integers(1, 4)), int(rng.integers(1, 4))
            dim = int(rng.integers(1, 5))
            v = int(rng.integers(1, 3))
            b = make_bundle(samples=s, grid=(gh, gw), dim=dim, views=v)
            path = tmp_path / "x.peb"
            write_bundle(b, path)
            assert path.stat().st_size == layout_size(s, gh, gw, dim, v)

    def test_round_trip_bytes_stable(self, tmp_path):
        b = make_bundle(samples=4, views=2, seed=3)
        p1, p2 = tmp_path / "a.peb", tmp_path / "b.peb"
        write_bundle(b, p1)
        again = read_bundle(p1)
        write_bundle(again, p2)
        assert p1.read_bytes() == p2.read_bytes()

    def test_round_trip_values(self, tmp_path):
        b = make_bundle(samples=2, views=2, seed=5)
        path = tmp_path / "c.peb"
        write_bundle(b, path)
        r = read_bundle(path)
        assert np.array_equal(r.embeddings, b.embeddings)
        assert np.array_equal(r.labels, b.labels)
        assert np.array_equal(r.part_ids, b.part_ids)
        assert np.array_equal(r.rects, b.rects)

    def test_bad_magic(self, tmp_path):
        path = tmp_path / "bad.peb"
        write_bundle(make_bundle(), path)
        blob = bytearray(path.read_bytes())
        blob[:4] = b"XEB1"
        path.write_bytes(bytes(blob))
        with pytest.raises(BadMagic):
            read_bundle(path)

    def test_version_mismatch(self, tmp_path):
        path = tmp_path / "v9.peb"
        write_bundle(make_bundle(), path)
        blob = bytearray(path.read_bytes())
        blob[4:8] = (9).to_bytes(4, "little")
        path.write_bytes(bytes(blob))
        with pytest.raises(VersionMismatch):
            read_bundle(path)

    def test_truncated_payload(self, tmp_path):
        path = tmp_path / "t.peb"
        write_bundle(make_bundle(), path)
        blob = path.read_bytes()
        path.write_bytes(blob[:-7])
        with pytest.raises(TruncatedFile):
            read_bundle(path)

    def test_trailing_bytes_rejected(self, tmp_path):
        path = tmp_path / "long.peb"
        write_bundle(make_bundle(), path)
        path.write_bytes(path.read_bytes() + b"xx")
        with pytest.raises(InvariantViolation):
            read_bundle(path)

    def test_nan_embedding_rejected(self, tmp_path):
        b = make_bundle()
        b.embeddings[0, 0, 0, 0] = np.nan
        path = tmp_path / "nan.peb"
        with pytest.raises(NonFiniteValue):
            write_bundle(b, path)
        # write exactly the same layout by hand to test the reader side
        b.embeddings[0, 0, 0, 0] = 0.0
        write_bundle(b, path)
        blob = bytearray(path.read_bytes())
        off = 36 + 4 + 16  # header, label, first rect
        blob[off : off + 4] = np.float32(np.nan).tobytes()
        path.write_bytes(bytes(blob))
        with pytest.raises(NonFiniteValue):
            read_bundle(path)

    def test_label_out_of_range_rejected(self, tmp_path):
        b = make_bundle()
        b.labels[0] = 99
        with pytest.raises(InvariantViolation):
            write_bundle(b, tmp_path / "l.peb")

    def test_missing_file(self, tmp_path):
        with pytest.raises(IoFailure):
            read_bundle(tmp_path / "nope.peb")


class TestCheckpoint:
    def make_ckpt(self, seed=0):
        rng = np.random.default_rng(seed)
        return Checkpoint(
            config={"head": {"num_prototypes": 4}, "note": "x"},
            arrays={
                "proj_w": rng.normal(size=(4, 3)).astype(np.float32),
                "proto_s": rng.normal(size=(5, 4)).astype(np.float32),
            },
            epoch=7,
            step=123,
            seed=9,
        )

    def test_round_trip_bitwise(self, tmp_path):
        ckpt = self.make_ckpt()
        path = tmp_path / "ck.phc"
        save_checkpoint(ckpt, path)
        again = load_checkpoint(path)
        for name, arr in ckpt.arrays.items():
            assert np.array_equal(again.arrays[name], arr)
            assert again.arrays[name].dtype == np.float32
        assert again.epoch == 7 and again.step == 123 and again.seed == 9
        p2 = tmp_path / "ck2.phc"
        save_checkpoint(again, p2)
        assert path.read_bytes() == p2.read_bytes()

    def test_shape_mismatch_detected(self, tmp_path):
        ckpt = self.make_ckpt()
        path = tmp_path / "ck.phc"
        save_checkpoint(ckpt, path)
        blob = path.read_bytes()
        # grow a declared shape without adding payload
        tampered = blob.replace(b'"shape": [4, 3]', b'"shape": [4, 9]')
        assert tampered != blob
        hlen_old = len(blob) - 8 - 4 - sum(a.size * 4 for a in ckpt.arrays.values())
        path.write_bytes(
            tampered[:8]
            + (hlen_old + len(tampered) - len(blob)).to_bytes(4, "little")
            + tampered[12:]
        )
        with pytest.raises(ShapeMismatch):
            load_checkpoint(path)

    def test_missing_file(self, tmp_path):
        with pytest.raises(IoFailure):
            load_checkpoint(tmp_path / "missing.phc")
