"""Checkpoint container: bit-exact round trips, header guards, and
corruption detection."""

import numpy as np
import pytest

from orsnn.attention import AttentionPlan
from orsnn.checkpoint import (
    CKPT_FORMAT,
    CKPT_VERSION,
    load_checkpoint,
    save_checkpoint,
)
from orsnn.errors import (
    ArchMismatch,
    BadMagic,
    CorruptPayload,
    DatasetNotFound,
    VersionMismatch,
)
from orsnn.metrics import apply_pruning
from orsnn.network import build_network

SMALL = "c8k3s1p1-BN-LIF-(OR-SEW Block(c16))-AP-FC4"


def trained_like_net(seed=0, time_steps=2, **kwargs):
    """A net with perturbed weights and exercised norm statistics, so a
    round trip has to carry real state, not just the seeded init."""
    net = build_network(SMALL, time_steps=time_steps, in_channels=1,
                        seed=seed, **kwargs)
    rng = np.random.default_rng(seed + 100)
    for _, p in net.named_params():
        p.data += rng.normal(0, 0.05, size=p.data.shape).astype(p.data.dtype)
    for _ in range(2):
        batch = (rng.random((time_steps, 4, 1, 12, 12)) < 0.5).astype(np.float32)
        net.forward(batch, training=True)
    return net


def batch(seed=9, time_steps=2):
    rng = np.random.default_rng(seed)
    return (rng.random((time_steps, 3, 1, 12, 12)) < 0.5).astype(np.float32)


def tamper_header(path, mutate):
    raw = path.read_bytes()
    head, _, body = raw.partition(b"\n\n")
    lines = head.decode().split("\n")
    path.write_bytes(("\n".join(mutate(lines)) + "\n\n").encode() + body)


class TestRoundTrip:
    def test_forward_is_bit_identical_after_reload(self, tmp_path):
        net = trained_like_net(seed=3)
        x = batch()
        before = net.forward(x).data.tobytes()
        save_checkpoint(net, tmp_path / "run.ckpt", epoch=17)
        loaded, epoch = load_checkpoint(tmp_path / "run.ckpt")
        assert epoch == 17
        assert loaded.forward(x).data.tobytes() == before

    def test_parameters_and_buffers_round_trip_exactly(self, tmp_path):
        net = trained_like_net(seed=4)
        save_checkpoint(net, tmp_path / "run.ckpt")
        loaded, _ = load_checkpoint(tmp_path / "run.ckpt")
        for (na, pa), (nb, pb) in zip(net.named_params(), loaded.named_params()):
            assert na == nb
            assert pa.data.tobytes() == pb.data.tobytes(), na
        for (na, ba), (nb, bb) in zip(net.named_buffers(), loaded.named_buffers()):
            assert na == nb
            assert ba.tobytes() == bb.tobytes(), na
        # the exercised norm statistics are not the fresh-init ones
        fresh = build_network(SMALL, time_steps=2, in_channels=1, seed=4)
        fresh_buffers = dict(fresh.named_buffers())
        assert any(dict(loaded.named_buffers())[n].tobytes() != b.tobytes()
                   for n, b in fresh_buffers.items())

    def test_loaded_values_are_the_saved_ones_not_the_seeded_init(self, tmp_path):
        net = trained_like_net(seed=5)
        save_checkpoint(net, tmp_path / "run.ckpt")
        loaded, _ = load_checkpoint(tmp_path / "run.ckpt")
        fresh = build_network(SMALL, time_steps=2, in_channels=1, seed=5)
        saved = dict(net.named_params())
        live = dict(loaded.named_params())
        init = dict(fresh.named_params())
        assert live["encoder.weight"].data.tobytes() == saved["encoder.weight"].data.tobytes()
        assert live["encoder.weight"].data.tobytes() != init["encoder.weight"].data.tobytes()

    def test_expect_arch_accepts_matching_string(self, tmp_path):
        net = trained_like_net(seed=6)
        save_checkpoint(net, tmp_path / "run.ckpt")
        loaded, _ = load_checkpoint(tmp_path / "run.ckpt", expect_arch=SMALL)
        assert loaded.arch_string == SMALL

    def test_attention_plan_and_reductions_survive(self, tmp_path):
        plan = AttentionPlan("C", "a", temporal_reduction=2,
                             channel_reduction=2, spatial_kernel=5)
        net = build_network(SMALL, attention=plan, time_steps=4,
                            in_channels=1, seed=7)
        save_checkpoint(net, tmp_path / "run.ckpt")
        loaded, _ = load_checkpoint(tmp_path / "run.ckpt")
        assert loaded.attention == plan
        x = batch(time_steps=4)
        assert loaded.forward(x).data.tobytes() == net.forward(x).data.tobytes()

    def test_pruned_network_round_trips_as_pruned(self, tmp_path):
        net = build_network(SMALL, time_steps=2, in_channels=1, seed=8)
        params = dict(net.named_params())
        params["block1.shortcut_bn.gamma"].data[...] = 0.0
        params["block1.shortcut_bn.beta"].data[...] = -5.0
        pruned = apply_pruning(net, ["block1.shortcut_lif"], batch(seed=1))
        save_checkpoint(pruned, tmp_path / "pruned.ckpt", epoch=3)
        loaded, epoch = load_checkpoint(tmp_path / "pruned.ckpt")
        assert epoch == 3
        assert loaded.pruned_block_names() == ["block1"]
        assert "block1.shortcut_conv.weight" not in dict(loaded.named_params())
        x = batch(seed=2)
        assert loaded.forward(x).data.tobytes() == pruned.forward(x).data.tobytes()


class TestGuards:
    def save_one(self, tmp_path, **kwargs):
        net = trained_like_net(seed=1, **kwargs)
        path = tmp_path / "run.ckpt"
        save_checkpoint(net, path)
        return path

    def test_missing_file(self, tmp_path):
        with pytest.raises(DatasetNotFound):
            load_checkpoint(tmp_path / "absent.ckpt")

    def test_bad_magic(self, tmp_path):
        p = tmp_path / "x.ckpt"
        p.write_bytes(b"definitely not a checkpoint\n\nmore bytes")
        with pytest.raises(BadMagic, match="not a checkpoint file"):
            load_checkpoint(p)

    def test_version_mismatch(self, tmp_path):
        p = self.save_one(tmp_path)
        tamper_header(p, lambda ls: [f"{CKPT_FORMAT} v999"] + ls[1:])
        with pytest.raises(VersionMismatch, match="v999"):
            load_checkpoint(p)
        assert CKPT_VERSION == "v1"

    def test_expect_arch_mismatch(self, tmp_path):
        p = self.save_one(tmp_path)
        with pytest.raises(ArchMismatch, match="differs from expected"):
            load_checkpoint(p, expect_arch="c8k3s1p1-BN-LIF-AP-FC4")

    def test_header_never_ends(self, tmp_path):
        p = self.save_one(tmp_path)
        head = p.read_bytes().partition(b"\n\n")[0]
        p.write_bytes(head)
        with pytest.raises(CorruptPayload, match="header never ends"):
            load_checkpoint(p)

    def test_malformed_header_line(self, tmp_path):
        p = self.save_one(tmp_path)
        tamper_header(p, lambda ls: [ls[0], "this line has no equals"] + ls[1:])
        with pytest.raises(CorruptPayload, match="malformed header line"):
            load_checkpoint(p)

    def test_missing_header_key(self, tmp_path):
        p = self.save_one(tmp_path)
        tamper_header(p, lambda ls: [l for l in ls if not l.startswith("lif_tau=")])
        with pytest.raises(CorruptPayload, match="missing keys"):
            load_checkpoint(p)

    def test_payload_ends_early(self, tmp_path):
        p = self.save_one(tmp_path)
        p.write_bytes(p.read_bytes()[:-20])
        with pytest.raises(CorruptPayload, match="payload ends early"):
            load_checkpoint(p)

    def test_trailing_bytes(self, tmp_path):
        p = self.save_one(tmp_path)
        p.write_bytes(p.read_bytes() + b"JUNK")
        with pytest.raises(CorruptPayload, match="trailing bytes"):
            load_checkpoint(p)

    def test_unbuildable_arch_in_header(self, tmp_path):
        p = self.save_one(tmp_path)
        tamper_header(p, lambda ls: [
            "arch=c8k3s1p1-BN-LIF" if l.startswith("arch=") else l for l in ls])
        with pytest.raises(ArchMismatch, match="cannot rebuild saved graph"):
            load_checkpoint(p)

    def test_edited_arch_makes_shapes_mismatch(self, tmp_path):
        p = self.save_one(tmp_path)
        edited = SMALL.replace("Block(c16)", "Block(c8)")
        tamper_header(p, lambda ls: [
            f"arch={edited}" if l.startswith("arch=") else l for l in ls])
        with pytest.raises(ArchMismatch, match="holds .* values, graph expects"):
            load_checkpoint(p)

    def test_unknown_pruned_block(self, tmp_path):
        p = self.save_one(tmp_path)
        tamper_header(p, lambda ls: [
            "pruned=block9" if l.startswith("pruned=") else l for l in ls])
        with pytest.raises(ArchMismatch, match="pruned block 'block9'"):
            load_checkpoint(p)
