import struct

import numpy as np
import pytest

from cladapt.checkpoint import (
    MAGIC,
    VERSION,
    CheckpointError,
    CheckpointMagicError,
    CheckpointTruncationError,
    CheckpointVersionError,
    dumps,
    load,
    loads,
    save,
)


def _sample_arrays():
    rng = np.random.default_rng(0)
    return {
        "backbone.block0.wq": rng.standard_normal((8, 8)),
        "domain1.head.b": rng.standard_normal(5),
        "domain1.head.w": rng.standard_normal((8, 5)),
        "backbone.cls": rng.standard_normal((1, 1, 8)),
        "scalarish": np.array(3.25),
    }


def test_round_trip_exact():
    arrays = _sample_arrays()
    back = loads(dumps(arrays))
    assert set(back) == set(arrays)
    for name in arrays:
        assert back[name].shape == np.asarray(arrays[name]).shape
        assert np.array_equal(back[name], arrays[name])
        assert back[name].dtype == np.float64


def test_bytes_start_with_magic_and_version():
    blob = dumps({})
    assert blob[:5] == MAGIC
    (v,) = struct.unpack_from("<H", blob, 5)
    assert v == VERSION


def test_insertion_order_does_not_change_bytes():
    arrays = _sample_arrays()
    names = list(arrays)
    reordered = {n: arrays[n] for n in reversed(names)}
    assert dumps(arrays) == dumps(reordered)


def test_records_are_sorted_by_name():
    blob = dumps(_sample_arrays())
    found = []
    pos = 7
    while pos < len(blob):
        (nlen,) = struct.unpack_from("<H", blob, pos)
        pos += 2
        found.append(blob[pos : pos + nlen].decode("utf-8"))
        pos += nlen
        (rank,) = struct.unpack_from("<B", blob, pos)
        pos += 1
        shape = struct.unpack_from("<%dI" % rank, blob, pos)
        pos += 4 * rank
        count = 1
        for n in shape:
            count *= n
        pos += 8 * count
    assert found == sorted(found)


def test_file_round_trip(tmp_path):
    path = tmp_path / "weights.clck"
    arrays = _sample_arrays()
    save(path, arrays)
    back = load(path)
    for name in arrays:
        assert np.array_equal(back[name], arrays[name])


def test_bad_magic_raises_magic_error():
    blob = b"XXXXX" + dumps(_sample_arrays())[5:]
    with pytest.raises(CheckpointMagicError):
        loads(blob)


def test_bad_version_raises_version_error():
    blob = dumps(_sample_arrays())
    blob = blob[:5] + struct.pack("<H", 99) + blob[7:]
    with pytest.raises(CheckpointVersionError):
        loads(blob)


def test_truncation_raises_truncation_error_at_any_cut():
    full = {"a": np.arange(6.0).reshape(2, 3), "b": np.array([1.0])}
    blob = dumps(full)
    # the format is self-delimiting, so a cut exactly on a record boundary
    # parses as a shorter valid file; any other cut must raise the
    # truncation class, never a bare struct.error or ValueError
    for cut in range(len(blob)):
        try:
            got = loads(blob[:cut])
        except CheckpointTruncationError:
            continue
        except CheckpointMagicError:
            assert cut < 5
            continue
        assert set(got) < set(full), "cut at %d parsed too much" % cut
        for name in got:
            assert np.array_equal(got[name], full[name])


def test_error_classes_share_a_base():
    assert issubclass(CheckpointMagicError, CheckpointError)
    assert issubclass(CheckpointVersionError, CheckpointError)
    assert issubclass(CheckpointTruncationError, CheckpointError)


def test_empty_checkpoint_round_trips():
    assert loads(dumps({})) == {}


def test_non_contiguous_input_is_normalized():
    base = np.arange(24.0).reshape(4, 6)
    view = base[:, ::2]
    back = loads(dumps({"v": view}))
    assert np.array_equal(back["v"], view)
