"""Latents -> relative inter-residue transforms -> assembled frames.

A small feed-forward network maps each adjacent latent pair to a unit
quaternion and a translation; the chain is then rebuilt by composing those
relative transforms from a reference frame. The network's inputs are
pose-invariant latents, so the assembled structure's internal geometry is
independent of the reference frame, and replacing the reference by g o ref
transforms the whole structure by g.
"""

from __future__ import annotations

import numpy as np
import torch
from torch import nn

from .errors import ConfigError, ShapeMismatch
from .geometry import BackboneFrames, RigidFrame, Rotation, compose, relative_frame
from .tokenizer import Codebook, embed


def quaternion_to_matrix(q: torch.Tensor) -> torch.Tensor:
    """Normalized (w, x, y, z) quaternions to rotation matrices, batched."""
    q = q / torch.linalg.vector_norm(q, dim=-1, keepdim=True)
    w, x, y, z = q.unbind(-1)
    row0 = torch.stack([1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)], dim=-1)
    row1 = torch.stack([2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)], dim=-1)
    row2 = torch.stack([2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)], dim=-1)
    return torch.stack([row0, row1, row2], dim=-2)


class PairDecoder(nn.Module):
    """(latent_i, latent_{i+1}) -> quaternion (4) + translation (3)."""

    def __init__(self, latent_dim: int, hidden: int = 128):
        super().__init__()
        self.latent_dim = latent_dim
        self.net = nn.Sequential(
            nn.Linear(2 * latent_dim, hidden),
            nn.SiLU(),
            nn.Linear(hidden, hidden),
            nn.SiLU(),
            nn.Linear(hidden, 7),
        )
        # start at identity rotations: quaternion bias (1, 0, 0, 0)
        with torch.no_grad():
            self.net[-1].bias.zero_()
            self.net[-1].bias[0] = 1.0
        self.double()

    def forward(self, latents: torch.Tensor):
        """latents (..., L, d) -> (quat (..., L-1, 4), trans (..., L-1, 3)).

        Quaternions are explicitly normalized with the sign fixed so the first
        component is nonnegative."""
        if latents.shape[-1] != self.latent_dim:
            raise ShapeMismatch(f"latent width {latents.shape[-1]} != {self.latent_dim}")
        if latents.shape[-2] < 2:
            raise ShapeMismatch("need at least 2 residues")
        pairs = torch.cat([latents[..., :-1, :], latents[..., 1:, :]], dim=-1)
        raw = self.net(pairs)
        quat, trans = raw[..., :4], raw[..., 4:]
        quat = quat / torch.linalg.vector_norm(quat, dim=-1, keepdim=True)
        sign = torch.where(quat[..., :1] < 0, -1.0, 1.0)
        return quat * sign, trans


def predict_relative_transforms(latents, decoder: PairDecoder) -> list[RigidFrame]:
    """Run the decoder and materialize RigidFrame objects (length L-1)."""
    latents = torch.as_tensor(np.asarray(latents), dtype=torch.float64)
    with torch.no_grad():
        quat, trans = decoder(latents)
    rots = quaternion_to_matrix(quat).numpy()
    trans = trans.numpy()
    return [RigidFrame(Rotation(rots[i]), trans[i]) for i in range(rots.shape[0])]


def assemble_frames(deltas: list[RigidFrame], t_ref: RigidFrame) -> BackboneFrames:
    """frames[0] = t_ref; frames[i+1] = frames[i] o deltas[i]."""
    if not deltas:
        raise ShapeMismatch("deltas must be nonempty")
    frames = [t_ref]
    for d in deltas:
        frames.append(compose(frames[-1], d))
    return BackboneFrames.from_frames(frames)


def extract_deltas(frames: BackboneFrames) -> list[RigidFrame]:
    """Relative transforms frames[i]^{-1} o frames[i+1] along the chain."""
    return [relative_frame(frames[i], frames[i + 1]) for i in range(len(frames) - 1)]


def canonical_reference() -> RigidFrame:
    return RigidFrame.identity()


def recentered(frames: BackboneFrames) -> BackboneFrames:
    """Shift so the Calpha centroid sits at the origin (visualization aid)."""
    centroid = frames.translations.mean(axis=0)
    return BackboneFrames(frames.rotations.copy(), frames.translations - centroid)


def _delta_targets(frames: BackboneFrames) -> tuple[np.ndarray, np.ndarray]:
    quats = np.empty((len(frames) - 1, 4))
    trans = np.empty((len(frames) - 1, 3))
    for i, d in enumerate(extract_deltas(frames)):
        quats[i] = d.rot.as_quaternion()
        trans[i] = d.trans
    return quats, trans


def train_decoder(
    corpus: list[tuple[np.ndarray, BackboneFrames]],
    cb: Codebook,
    decoder: PairDecoder | None = None,
    steps: int = 500,
    lr: float = 1e-3,
    seed: int = 0,
    finetune_embeddings: bool = True,
    log=None,
) -> tuple[PairDecoder, Codebook, list[float]]:
    """Fit the pair decoder (and optionally the embedding table) by gradient
    descent on quaternion geodesic loss plus squared translation error.

    corpus entries are (token_sequence, ground_truth_frames). Returns the
    decoder, a codebook carrying the fine-tuned embeddings, and the loss
    history. Deterministic per seed."""
    if not corpus:
        raise ConfigError("empty decoder training corpus")
    if decoder is None:
        torch.manual_seed(seed)
        decoder = PairDecoder(cb.d)

    token_arr = [np.asarray(t, dtype=np.int64) for t, _ in corpus]
    targets = [_delta_targets(f) for _, f in corpus]
    quat_t = [torch.as_tensor(q) for q, _ in targets]
    trans_t = [torch.as_tensor(t) for _, t in targets]

    emb = nn.Parameter(torch.as_tensor(cb.embeddings.copy()), requires_grad=finetune_embeddings)
    params = list(decoder.parameters()) + ([emb] if finetune_embeddings else [])
    opt = torch.optim.Adam(params, lr=lr)
    rng = np.random.default_rng(seed)
    history = []
    for step in range(steps):
        i = int(rng.integers(len(corpus)))
        tokens = torch.as_tensor(token_arr[i])
        latents = emb[tokens]
        quat, trans = decoder(latents)
        # geodesic-style quaternion loss, sign-invariant
        dot = torch.sum(quat * quat_t[i], dim=-1)
        loss_rot = torch.mean(1.0 - dot * dot)
        loss_trans = torch.mean(torch.sum((trans - trans_t[i]) ** 2, dim=-1))
        loss = loss_rot + loss_trans
        opt.zero_grad(set_to_none=True)
        loss.backward()
        opt.step()
        history.append(float(loss.detach()))
        if log is not None and step % 50 == 0:
            log.write(f"decoder step {step} loss {history[-1]:.6f}\n")
    cb_out = cb.with_embeddings(emb.detach().numpy().copy())
    return decoder, cb_out, history
