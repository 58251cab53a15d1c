"""Client gradient packets: batch-mean fidelity, serialization, hygiene."""

import numpy as np
import pytest

from gradleak.container import ContainerError
from gradleak.data import BatchSpec, generate_synthetic, sample_batch
from gradleak.flsim import (client_local_step, deserialize_packet, load_groundtruth,
                            model_checkpoint_hash, save_groundtruth, serialize_packet,
                            server_aggregate)
from gradleak.models import ModelSpec, build_model, forward_trace, save_checkpoint
from gradleak.tensor import Graph
from gradleak.training import ATConfig


@pytest.fixture(scope="module")
def ds():
    return generate_synthetic(12, 6, size=12, seed=0)


@pytest.fixture(scope="module")
def model():
    return build_model(ModelSpec("mlp-small", (1, 12, 12), num_classes=12), seed=0)


def per_sample_gradient_oracle(model, images, labels):
    """Accumulate single-sample gradients and average explicitly."""
    total = None
    for i in range(len(images)):
        model.zero_grad()
        with Graph() as g:
            trace = forward_trace(model, images[i : i + 1], labels[i : i + 1])
            g.backward(trace.loss)
        grads = {k: p.grad.copy() for k, p in model.params.items()}
        total = grads if total is None else {k: total[k] + grads[k] for k in grads}
    model.zero_grad()
    return {k: v / len(images) for k, v in total.items()}


class TestClientLocalStep:
    def test_single_sample_packet_equals_its_gradient(self, model, ds):
        packet, _ = client_local_step(model, ds.images[:1], ds.labels[:1])
        oracle = per_sample_gradient_oracle(model, ds.images[:1], ds.labels[:1])
        for name in packet.grads:
            np.testing.assert_allclose(packet.grads[name], oracle[name], atol=1e-6)

    def test_duplicated_sample_equals_single(self, model, ds):
        x = np.repeat(ds.images[:1], 2, axis=0)
        y = np.repeat(ds.labels[:1], 2)
        dup, _ = client_local_step(model, x, y, allow_duplicate_labels=True)
        single, _ = client_local_step(model, ds.images[:1], ds.labels[:1])
        for name in dup.grads:
            np.testing.assert_allclose(dup.grads[name], single.grads[name], atol=1e-6)

    def test_batch_mean_matches_per_sample_oracle(self, model, ds):
        images, labels, _ = sample_batch(ds, BatchSpec(4, seed=1))
        packet, record = client_local_step(model, images, labels)
        oracle = per_sample_gradient_oracle(model, images, labels)
        for name in packet.grads:
            np.testing.assert_allclose(packet.grads[name], oracle[name], atol=1e-5)
        np.testing.assert_array_equal(record.labels, labels)
        assert record.features.shape == (4, model.spec.feature_dim)

    def test_duplicate_labels_rejected_by_default(self, model, ds):
        x = np.repeat(ds.images[:1], 2, axis=0)
        y = np.repeat(ds.labels[:1], 2)
        with pytest.raises(ValueError, match="duplicate"):
            client_local_step(model, x, y)

    def test_at_mode_records_adversarial_inputs(self, model, ds):
        images, labels, _ = sample_batch(ds, BatchSpec(4, seed=2))
        packet, record = client_local_step(model, images, labels,
                                           at=ATConfig(norm="l2", epsilon=1.0), seed=3)
        assert packet.at_mode and record.at_mode
        assert not np.array_equal(record.adv_images, record.clean_images)
        np.testing.assert_array_equal(record.clean_images, images)
        # the packet is the gradient of the adversarial batch
        oracle = per_sample_gradient_oracle(model, record.adv_images, labels)
        np.testing.assert_allclose(packet.grads["head.w"], oracle["head.w"], atol=1e-5)

    def test_packet_has_no_raw_data_fields(self, model, ds):
        packet, _ = client_local_step(model, ds.images[:1], ds.labels[:1])
        assert set(packet.grads.keys()) == set(model.params.keys())
        for name, g in packet.grads.items():
            assert g.shape == model.params[name].shape


class TestSerialization:
    def test_round_trip_bit_exact(self, model, ds, tmp_path):
        packet, _ = client_local_step(model, ds.images[:2], ds.labels[:2])
        p1, p2 = tmp_path / "a.packet", tmp_path / "b.packet"
        serialize_packet(packet, p1)
        serialize_packet(deserialize_packet(p1, verify_checkpoint=False), p2)
        assert p1.read_bytes() == p2.read_bytes()

    def test_checkpoint_hash_verified(self, model, ds, tmp_path):
        ckpt = tmp_path / "model.ckpt"
        save_checkpoint(model, ckpt)
        packet, _ = client_local_step(model, ds.images[:2], ds.labels[:2],
                                      checkpoint_path=str(ckpt))
        path = tmp_path / "p.packet"
        serialize_packet(packet, path)
        deserialize_packet(path)  # hash matches
        ckpt.write_bytes(ckpt.read_bytes()[:-4] + b"\x00\x00\x00\x00")  # tamper
        with pytest.raises(ValueError, match="hash mismatch"):
            deserialize_packet(path)

    def test_in_memory_hash_equals_file_hash(self, model, tmp_path):
        from gradleak.container import sha256_file

        ckpt = tmp_path / "model.ckpt"
        save_checkpoint(model, ckpt)
        assert model_checkpoint_hash(model) == sha256_file(ckpt)

    def test_head_gradient_shape(self, model, ds, tmp_path):
        packet, _ = client_local_step(model, ds.images[:2], ds.labels[:2])
        path = tmp_path / "p.packet"
        serialize_packet(packet, path)
        back = deserialize_packet(path, verify_checkpoint=False)
        assert back.head_gradient().shape == (model.spec.feature_dim, 12)
        assert back.batch_size == 2

    def test_no_image_row_bytes_leak_into_packet(self, model, ds, tmp_path):
        images, labels, _ = sample_batch(ds, BatchSpec(4, seed=5))
        packet, _ = client_local_step(model, images, labels)
        path = tmp_path / "p.packet"
        serialize_packet(packet, path)
        blob = path.read_bytes()
        for img in images:
            for row in img[0]:
                assert row.astype("<f4").tobytes() not in blob

    def test_groundtruth_archive_round_trip(self, model, ds, tmp_path):
        images, labels, idx = sample_batch(ds, BatchSpec(3, seed=6))
        _, record = client_local_step(model, images, labels, dataset_indices=idx)
        path = tmp_path / "b.groundtruth"
        save_groundtruth(record, path)
        back = load_groundtruth(path)
        np.testing.assert_array_equal(back.labels, record.labels)
        np.testing.assert_allclose(back.features, record.features, atol=0)
        np.testing.assert_array_equal(back.dataset_indices, idx)


class TestServerAggregate:
    def test_single_packet_identity(self, model, ds):
        packet, _ = client_local_step(model, ds.images[:2], ds.labels[:2])
        agg = server_aggregate([packet])
        for name in packet.grads:
            np.testing.assert_array_equal(agg[name], packet.grads[name])

    def test_two_identical_packets_unchanged(self, model, ds):
        packet, _ = client_local_step(model, ds.images[:2], ds.labels[:2])
        agg = server_aggregate([packet, packet])
        np.testing.assert_allclose(agg["head.w"], packet.grads["head.w"], atol=1e-7)

    def test_three_packets_mean_oracle(self, model, ds):
        packets = []
        for seed in range(3):
            images, labels, _ = sample_batch(ds, BatchSpec(4, seed=seed))
            packets.append(client_local_step(model, images, labels)[0])
        agg = server_aggregate(packets)
        for name in agg:
            expected = (packets[0].grads[name] + packets[1].grads[name] + packets[2].grads[name]) / 3
            np.testing.assert_allclose(agg[name], expected, atol=1e-6)

    def test_mixed_checkpoints_rejected(self, model, ds):
        packet, _ = client_local_step(model, ds.images[:2], ds.labels[:2])
        other = build_model(ModelSpec("mlp-small", (1, 12, 12), num_classes=12), seed=99)
        packet2, _ = client_local_step(other, ds.images[:2], ds.labels[:2])
        with pytest.raises(ValueError, match="different checkpoints"):
            server_aggregate([packet, packet2])

    def test_empty_rejected(self):
        with pytest.raises(ValueError, match="no packets"):
            server_aggregate([])
