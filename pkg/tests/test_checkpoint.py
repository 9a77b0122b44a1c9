import struct

import numpy as np
import pytest

from msfin.core.exceptions import CheckpointError, ShapeError
from msfin.models.common import Subcommand
from msfin.nn.network import MSFIN
from msfin.services.checkpoint_service import MAGIC, Checkpoint, checkpoint_service
from msfin.tensor import DType, Tape, Tensor, l1_loss
from msfin.utils.optim import Adam


@pytest.fixture
def trained(tiny_net, tiny_manifest, rng):
    """Tiny network after one Adam step, so moments exist."""
    manifest = tiny_manifest()
    x = Tensor(rng.random((1, 3, 8, 8)).astype(np.float32))
    with Tape() as tape:
        loss = l1_loss(tiny_net(x), x)
        tape.backward(loss)
    Adam(tiny_net.parameters(), manifest.train).step(1e-3)
    return tiny_net, manifest


def _saved(tmp_path, trained, rng) -> tuple:
    net, manifest = trained
    checkpoint = checkpoint_service.capture(net, manifest, 7, rng)
    path = checkpoint_service.save(checkpoint, tmp_path / "run" / "a.msfn")
    return checkpoint, path


def test_round_trip_is_bit_exact(tmp_path, trained, rng):
    checkpoint, path = _saved(tmp_path, trained, rng)
    loaded = checkpoint_service.load(path)
    assert loaded.step == 7
    assert loaded.config == checkpoint.config
    assert loaded.rng_state == rng.bit_generator.state
    assert list(loaded.tensors) == list(checkpoint.tensors)
    for name, array in checkpoint.tensors.items():
        assert loaded.tensors[name].dtype == array.dtype
        assert loaded.tensors[name].tobytes() == array.tobytes()
    assert any(name.startswith("adam.m.") for name in loaded.tensors)
    assert path.read_bytes()[:4] == MAGIC


def test_save_leaves_no_temporary_files(tmp_path, trained, rng):
    _, path = _saved(tmp_path, trained, rng)
    assert [p.name for p in path.parent.iterdir()] == ["a.msfn"]


def test_restore_into_fresh_network(tmp_path, trained, rng, tiny_cfg):
    net, _ = trained
    _, path = _saved(tmp_path, trained, rng)
    fresh = MSFIN(tiny_cfg, seed=99)
    checkpoint_service.restore(fresh, checkpoint_service.load(path))
    for (name, a), (_, b) in zip(net.named_parameters(), fresh.named_parameters()):
        np.testing.assert_array_equal(a.data, b.data, err_msg=name)
        np.testing.assert_array_equal(a.exp_avg, b.exp_avg, err_msg=name)


def test_load_network_rebuilds_architecture(tmp_path, trained, rng):
    net, _ = trained
    _, path = _saved(tmp_path, trained, rng)
    loaded, manifest = checkpoint_service.load_network(path, command=Subcommand.EVAL)
    assert manifest.network.channels == 6
    assert loaded.num_parameters() == net.num_parameters()
    assert all(p.exp_avg is None for p in loaded.parameters())


@pytest.mark.parametrize("mutate,field", [
    (lambda blob: b"NOPE" + blob[4:], "magic"),
    (lambda blob: blob[:4] + struct.pack("<I", 9) + blob[8:], "version"),
    (lambda blob: blob[:-3], ".data"),
    (lambda blob: blob + b"\x00", "tensor table"),
    (lambda blob: blob[:10], "config"),
])
def test_corruption_names_the_field(tmp_path, trained, rng, mutate, field):
    _, path = _saved(tmp_path, trained, rng)
    path.write_bytes(mutate(path.read_bytes()))
    with pytest.raises(CheckpointError) as info:
        checkpoint_service.load(path)
    assert field in info.value.field
    assert str(path) in str(info.value)


def test_unknown_dtype_tag(tmp_path, trained, rng):
    checkpoint, path = _saved(tmp_path, trained, rng)
    blob = bytearray(path.read_bytes())
    text_len = struct.unpack("<I", blob[8:12])[0]
    first = 12 + text_len + 4
    name_len = struct.unpack("<H", blob[first:first + 2])[0]
    blob[first + 2 + name_len] = 7
    path.write_bytes(bytes(blob))
    with pytest.raises(CheckpointError) as info:
        checkpoint_service.load(path)
    assert info.value.field == f"{next(iter(checkpoint.tensors))}.dtype"


def test_missing_file(tmp_path):
    with pytest.raises(CheckpointError):
        checkpoint_service.load(tmp_path / "absent.msfn")


def test_restore_audits_names_and_shapes(tmp_path, trained, rng):
    net, _ = trained
    checkpoint, _ = _saved(tmp_path, trained, rng)
    first = next(iter(checkpoint.tensors))

    wrong_shape = dict(checkpoint.tensors)
    wrong_shape[first] = np.zeros((1, 1, 1, 1), dtype=np.float32)
    with pytest.raises(CheckpointError) as info:
        checkpoint_service.restore(net, Checkpoint(config=checkpoint.config, tensors=wrong_shape))
    assert info.value.field == first

    missing = {k: v for k, v in checkpoint.tensors.items() if k != first}
    with pytest.raises(CheckpointError):
        checkpoint_service.restore(net, Checkpoint(config=checkpoint.config, tensors=missing))

    extra = dict(checkpoint.tensors, stray=np.zeros((1, 1, 1, 1), dtype=np.float32))
    with pytest.raises(CheckpointError) as info:
        checkpoint_service.restore(net, Checkpoint(config=checkpoint.config, tensors=extra))
    assert info.value.field == "stray"


def test_invalid_echoed_config(tmp_path, trained, rng):
    checkpoint, _ = _saved(tmp_path, trained, rng)
    broken = Checkpoint(config={**checkpoint.config, "channels": "seven"}, tensors=checkpoint.tensors)
    path = checkpoint_service.save(broken, tmp_path / "b.msfn")
    with pytest.raises(CheckpointError) as info:
        checkpoint_service.load_network(path)
    assert info.value.field == "config"


def test_load_network_keeps_stored_precision(tmp_path, tiny_net64, tiny_manifest):
    path = checkpoint_service.save(
        checkpoint_service.capture(tiny_net64, tiny_manifest(), step=0), tmp_path / "f64.ckpt"
    )
    loaded, _ = checkpoint_service.load_network(path)
    assert loaded.dtype == DType.FLOAT64
    for (name, a), (_, b) in zip(tiny_net64.named_parameters(), loaded.named_parameters()):
        assert b.data.dtype == np.float64
        np.testing.assert_array_equal(a.data, b.data, err_msg=name)


def test_state_dict_is_a_detached_copy(tiny_net):
    state = tiny_net.state_dict()
    assert list(state) == [name for name, _ in tiny_net.named_parameters()]
    first = next(iter(state))
    state[first] += 1.0
    assert not np.array_equal(state[first], tiny_net.state_dict()[first])


def test_load_state_dict_strictness(tiny_cfg, tiny_net):
    other = MSFIN(tiny_cfg, seed=8)
    state = tiny_net.state_dict()
    first = next(iter(state))
    with pytest.raises(ShapeError, match="missing"):
        other.load_state_dict({k: v for k, v in state.items() if k != first})
    other.load_state_dict({first: state[first]}, strict=False)
    np.testing.assert_array_equal(other.state_dict()[first], state[first])
    with pytest.raises(ShapeError):
        other.load_state_dict({first: state[first][:, :1]}, strict=False)
