"""Single-round federated exchange: a client computes batch-averaged
gradients on its private batch (adversarial examples when doing AT) and
ships them; the attacker sees the model snapshot reference and those
gradients, nothing else.

Ground truth needed to score an attack goes into a separate archive that is
never part of the packet.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .container import (MAGIC_GROUNDTRUTH, MAGIC_PACKET, container_bytes, read_container,
                        sha256_bytes, sha256_file, write_container)
from .container import MAGIC_CHECKPOINT
from .models import Model, forward_trace
from .tensor import Graph
from .training import ATConfig, pgd_attack


@dataclass
class GradientPacket:
    """The attacker-visible artifact: one gradient array per model parameter."""

    checkpoint_hash: str
    checkpoint_path: str
    grads: dict[str, np.ndarray]
    batch_size: int | None  # None when the client does not disclose N
    at_mode: bool
    round_id: int = 0
    client_id: int = 0

    def head_gradient(self) -> np.ndarray:
        return self.grads["head.w"]


@dataclass
class ClientRoundRecord:
    """Evaluation-only ground truth for one client step; never serialized
    into a packet."""

    clean_images: np.ndarray
    labels: np.ndarray
    adv_images: np.ndarray  # equals clean_images when AT is off
    features: np.ndarray  # (N, D) penultimate features of the inputs used
    probs: np.ndarray  # (N, K)
    dataset_indices: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))
    at_mode: bool = False


def model_checkpoint_hash(model: Model) -> str:
    """Hash of the model's canonical checkpoint bytes; equals the sha256 of a
    file written by save_checkpoint."""
    data = container_bytes(MAGIC_CHECKPOINT, {"spec": model.spec.to_dict()},
                           {k: p.data for k, p in model.params.items()})
    return sha256_bytes(data)


def client_local_step(model: Model, images: np.ndarray, labels: np.ndarray,
                      at: ATConfig | None = None, seed: int = 0,
                      checkpoint_path: str = "", checkpoint_hash: str | None = None,
                      round_id: int = 0, client_id: int = 0,
                      disclose_batch_size: bool = True,
                      allow_duplicate_labels: bool = False,
                      dataset_indices=None) -> tuple[GradientPacket, ClientRoundRecord]:
    """One local training step: returns the shipped packet and the ground truth.

    Packet gradients are the batch mean (the loss is the batch-mean
    cross-entropy, so backward() produces the average directly).
    """
    images = np.asarray(images, dtype=np.float32)
    labels = np.asarray(labels, dtype=np.int64)
    if not allow_duplicate_labels and len(np.unique(labels)) != len(labels):
        raise ValueError("client_local_step: batch has duplicate labels; pass "
                         "allow_duplicate_labels=True to override")
    used = images
    if at is not None and at.epsilon > 0:
        used = pgd_attack(model, images, labels, at, seed=seed)
    model.zero_grad()
    with Graph() as g:
        trace = forward_trace(model, used, labels)
        g.backward(trace.loss)
    grads = {name: p.grad.astype(np.float32, copy=True) for name, p in model.params.items()}
    features = trace.features.data.copy()
    probs = trace.probs.copy()
    model.zero_grad()

    packet = GradientPacket(
        checkpoint_hash=checkpoint_hash or model_checkpoint_hash(model),
        checkpoint_path=checkpoint_path,
        grads=grads,
        batch_size=len(images) if disclose_batch_size else None,
        at_mode=at is not None and at.epsilon > 0,
        round_id=round_id,
        client_id=client_id,
    )
    record = ClientRoundRecord(
        clean_images=images.copy(),
        labels=labels.copy(),
        adv_images=used.copy(),
        features=features,
        probs=probs,
        dataset_indices=(np.asarray(dataset_indices, dtype=np.int64)
                         if dataset_indices is not None else np.zeros(0, dtype=np.int64)),
        at_mode=packet.at_mode,
    )
    return packet, record


def serialize_packet(packet: GradientPacket, path):
    header = {
        "checkpoint_hash": packet.checkpoint_hash,
        "checkpoint_path": str(packet.checkpoint_path),
        "batch_size": packet.batch_size,
        "at_mode": packet.at_mode,
        "round_id": packet.round_id,
        "client_id": packet.client_id,
    }
    write_container(path, MAGIC_PACKET, header, packet.grads)


def deserialize_packet(path, verify_checkpoint: bool = True) -> GradientPacket:
    """Load a packet; when it references an on-disk checkpoint, verify the
    hash so the attacker is guaranteed to hold the matching model."""
    header, grads = read_container(path, MAGIC_PACKET)
    packet = GradientPacket(
        checkpoint_hash=header["checkpoint_hash"],
        checkpoint_path=header["checkpoint_path"],
        grads=grads,
        batch_size=header["batch_size"],
        at_mode=header["at_mode"],
        round_id=header["round_id"],
        client_id=header["client_id"],
    )
    if verify_checkpoint and packet.checkpoint_path:
        actual = sha256_file(packet.checkpoint_path)
        if actual != packet.checkpoint_hash:
            raise ValueError(f"packet {path}: checkpoint hash mismatch for "
                             f"{packet.checkpoint_path} (packet {packet.checkpoint_hash[:12]}..., "
                             f"file {actual[:12]}...)")
    return packet


def server_aggregate(packets: list[GradientPacket]) -> dict[str, np.ndarray]:
    """Elementwise mean of packets that reference the same checkpoint."""
    if not packets:
        raise ValueError("server_aggregate: no packets")
    ref = packets[0].checkpoint_hash
    for p in packets[1:]:
        if p.checkpoint_hash != ref:
            raise ValueError("server_aggregate: packets reference different checkpoints")
    names = packets[0].grads.keys()
    return {name: np.mean(np.stack([p.grads[name] for p in packets]), axis=0) for name in names}


def save_groundtruth(record: ClientRoundRecord, path):
    header = {"labels": [int(v) for v in record.labels],
              "dataset_indices": [int(v) for v in record.dataset_indices],
              "at_mode": record.at_mode}
    arrays = {"clean_images": record.clean_images, "adv_images": record.adv_images,
              "features": record.features, "probs": record.probs}
    write_container(path, MAGIC_GROUNDTRUTH, header, arrays)


def load_groundtruth(path) -> ClientRoundRecord:
    header, arrays = read_container(path, MAGIC_GROUNDTRUTH)
    return ClientRoundRecord(
        clean_images=arrays["clean_images"],
        labels=np.asarray(header["labels"], dtype=np.int64),
        adv_images=arrays["adv_images"],
        features=arrays["features"],
        probs=arrays["probs"],
        dataset_indices=np.asarray(header["dataset_indices"], dtype=np.int64),
        at_mode=header["at_mode"],
    )
