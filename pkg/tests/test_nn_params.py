import struct
import zipfile

import numpy as np
import pytest
import torch

from timealign.errors import FormatError, ShapeError
from timealign.nn_core.params import (MAGIC, LoadReport, ParamStore,
                                      load_partial_checkpoint, load_tensor,
                                      save_tensor, tensor_from_bytes,
                                      tensor_to_bytes)


def test_tensor_bytes_layout():
    arr = np.arange(6, dtype=np.float32).reshape(2, 3)
    buf = tensor_to_bytes(arr)
    assert buf[:5] == MAGIC
    assert buf[5] == 2  # rank
    assert struct.unpack("<2I", buf[6:14]) == (2, 3)
    payload = np.frombuffer(buf[14:], dtype="<f4")
    assert np.array_equal(payload.reshape(2, 3), arr)


def test_tensor_bytes_roundtrip():
    rng = np.random.default_rng(0)
    for shape in [(), (1,), (5,), (2, 3, 4), (1, 2, 1, 2)]:
        arr = rng.normal(size=shape).astype(np.float32)
        back = tensor_from_bytes(tensor_to_bytes(arr))
        assert back.shape == arr.shape
        assert np.array_equal(back, arr)


def test_tensor_bytes_scalar():
    buf = tensor_to_bytes(np.float32(2.5))
    assert buf[5] == 0
    assert len(buf) == 6 + 4
    assert tensor_from_bytes(buf) == np.float32(2.5)


def test_tensor_from_bytes_errors():
    good = tensor_to_bytes(np.ones((2, 2), dtype=np.float32))
    with pytest.raises(FormatError):
        tensor_from_bytes(b"TAB")
    with pytest.raises(FormatError):
        tensor_from_bytes(b"XXXXX" + good[5:])
    with pytest.raises(FormatError):
        tensor_from_bytes(good[:8])  # truncated dims
    with pytest.raises(FormatError):
        tensor_from_bytes(good[:-4])  # payload short
    with pytest.raises(FormatError):
        tensor_from_bytes(good + b"\x00" * 4)  # payload long
    with pytest.raises(FormatError):
        tensor_from_bytes(MAGIC + struct.pack("<B", 9))


def test_save_load_tensor(tmp_path):
    arr = np.linspace(-1, 1, 12, dtype=np.float32).reshape(3, 4)
    p = tmp_path / "t.tab"
    save_tensor(p, arr)
    assert np.array_equal(load_tensor(p), arr)


def test_param_store_basics():
    store = ParamStore()
    store.set("a.weight", np.ones((2, 2)))
    store.set("b", np.zeros(3))
    assert len(store) == 2
    assert "a.weight" in store and "c" not in store
    assert store.names() == ["a.weight", "b"]
    assert store.get("a.weight").dtype == np.float32
    with pytest.raises(KeyError):
        store.get("c")
    # stored copies are isolated from the caller's array
    src = np.ones(3)
    store.set("c", src)
    src[0] = 99.0
    assert store.get("c")[0] == 1.0


def test_param_store_shape_guard():
    store = ParamStore()
    store.set("w", np.ones((2, 2)))
    with pytest.raises(ShapeError):
        store.set("w", np.ones((3, 2)))
    store.set("w", np.full((2, 2), 5.0))  # same shape fine
    assert store.get("w")[0, 0] == 5.0


def test_param_store_grads():
    store = ParamStore()
    store.set("w", np.ones((2,)))
    assert np.array_equal(store.grad("w"), np.zeros(2))
    store.set_grad("w", np.array([1.0, -1.0]))
    assert np.array_equal(store.grad("w"), [1.0, -1.0])
    with pytest.raises(ShapeError):
        store.set_grad("w", np.ones(3))


def test_store_zip_roundtrip(tmp_path):
    rng = np.random.default_rng(1)
    store = ParamStore()
    store.set("enc.w", rng.normal(size=(4, 3)).astype(np.float32))
    store.set("enc.b", rng.normal(size=(4,)).astype(np.float32))
    p = tmp_path / "model.ckpt"
    store.save(p)
    assert zipfile.is_zipfile(p)
    with zipfile.ZipFile(p) as zf:
        assert sorted(zf.namelist()) == ["enc.b.tab", "enc.w.tab"]
    back = ParamStore.load(p)
    assert back.names() == store.names()
    for n in store.names():
        assert np.array_equal(back.get(n), store.get(n))


def test_store_load_errors(tmp_path):
    bad = tmp_path / "junk.ckpt"
    bad.write_bytes(b"this is not a zip")
    with pytest.raises(FormatError):
        ParamStore.load(bad)
    weird = tmp_path / "weird.ckpt"
    with zipfile.ZipFile(weird, "w") as zf:
        zf.writestr("notes.txt", "hello")
    with pytest.raises(FormatError):
        ParamStore.load(weird)
    with pytest.raises(FileNotFoundError):
        ParamStore.load(tmp_path / "missing.ckpt")


def test_store_module_roundtrip():
    torch.manual_seed(0)
    net = torch.nn.Sequential(torch.nn.Linear(3, 4), torch.nn.Linear(4, 2))
    store = ParamStore.from_module(net)
    assert set(store.names()) == {n for n, _ in net.named_parameters()}
    twin = torch.nn.Sequential(torch.nn.Linear(3, 4), torch.nn.Linear(4, 2))
    assigned = store.assign_to_module(twin)
    assert sorted(assigned) == sorted(store.names())
    for (_, a), (_, b) in zip(net.named_parameters(), twin.named_parameters()):
        assert torch.equal(a, b)


def test_load_partial_checkpoint(tmp_path):
    ckpt = ParamStore()
    ckpt.set("shared", np.full((2, 2), 7.0))
    ckpt.set("reshaped", np.ones((3,)))
    path = tmp_path / "c.ckpt"
    ckpt.save(path)

    store = ParamStore()
    store.set("shared", np.zeros((2, 2)))
    store.set("reshaped", np.zeros((4,)))
    store.set("extra", np.zeros((1,)))
    report = load_partial_checkpoint(store, path)

    assert report.loaded == ["shared"]
    assert np.array_equal(store.get("shared"), np.full((2, 2), 7.0))
    skipped = dict(report.skipped)
    assert "shape mismatch" in skipped["reshaped"]
    assert skipped["extra"] == "missing from checkpoint"
    assert np.array_equal(store.get("reshaped"), np.zeros(4))
    assert "loaded 1" in report.summary()
    assert isinstance(report, LoadReport)
