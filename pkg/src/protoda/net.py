"""Per-pixel MLP with an explicit classifier head and hand-written backprop.

Each pixel is classified from its flattened (2r+1) x (2r+1) x channels
neighborhood (zero padding at the border). The body is a tanh MLP, the
penultimate linear layer produces the pixel embedding, and a final linear
head maps the embedding to C+1 logits (known classes plus unknown).

The embedding is exposed raw; consumers L2-normalize it themselves. Upstream
gradients arriving on the *normalized* embedding are pulled back through the
normalization Jacobian inside ``backward``, so loss modules never deal with
the chain rule past their own outputs.

EmbeddingMap is a plain (H, W, d) float array.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

CHECKPOINT_MAGIC = "protoda-pixelnet-v1"


@dataclass
class PixelNet:
    patch_radius: int
    channels: int
    hidden: tuple[int, ...]
    embed_dim: int
    num_classes: int  # head outputs num_classes + 1 logits
    seed: int
    params: np.ndarray = field(repr=False)

    # ----- architecture bookkeeping -------------------------------------

    @property
    def patch_size(self) -> int:
        side = 2 * self.patch_radius + 1
        return side * side * self.channels

    @property
    def layer_dims(self) -> list[tuple[int, int]]:
        """(n_in, n_out) per linear layer, body then embedding then head."""
        widths = [self.patch_size, *self.hidden, self.embed_dim, self.num_classes + 1]
        return list(zip(widths[:-1], widths[1:]))

    @property
    def param_count(self) -> int:
        return sum(i * o + o for i, o in self.layer_dims)

    def param_slices(self) -> list[tuple[slice, slice, tuple[int, int]]]:
        """(weight slice, bias slice, weight shape) per layer, in params order."""
        out = []
        offset = 0
        for n_in, n_out in self.layer_dims:
            w = slice(offset, offset + n_in * n_out)
            b = slice(w.stop, w.stop + n_out)
            out.append((w, b, (n_in, n_out)))
            offset = b.stop
        return out

    def _layers(self, params: np.ndarray) -> list[tuple[np.ndarray, np.ndarray]]:
        return [
            (params[w].reshape(shape), params[b])
            for w, b, shape in self.param_slices()
        ]

    @classmethod
    def create(
        cls,
        num_classes: int,
        patch_radius: int = 2,
        channels: int = 3,
        hidden: tuple[int, ...] = (64, 64),
        embed_dim: int | None = None,
        seed: int = 0,
    ) -> "PixelNet":
        """Xavier-initialized network; embed_dim defaults to 2C+1."""
        if embed_dim is None:
            embed_dim = 2 * num_classes + 1
        net = cls(
            patch_radius=patch_radius,
            channels=channels,
            hidden=tuple(hidden),
            embed_dim=embed_dim,
            num_classes=num_classes,
            seed=seed,
            params=np.zeros(0),
        )
        rng = np.random.default_rng(seed)
        chunks = []
        for n_in, n_out in net.layer_dims:
            std = np.sqrt(2.0 / (n_in + n_out))
            chunks.append(rng.normal(0.0, std, size=n_in * n_out))
            chunks.append(np.zeros(n_out))
        net.params = np.concatenate(chunks)
        return net

    def clone(self) -> "PixelNet":
        return PixelNet(
            patch_radius=self.patch_radius,
            channels=self.channels,
            hidden=self.hidden,
            embed_dim=self.embed_dim,
            num_classes=self.num_classes,
            seed=self.seed,
            params=self.params.copy(),
        )

    # ----- forward / backward -------------------------------------------

    def _patches(self, image: np.ndarray) -> np.ndarray:
        img = np.asarray(image, dtype=np.float64)
        if img.ndim != 3 or img.shape[-1] != self.channels:
            raise ValueError(
                f"expected an (H, W, {self.channels}) image, got shape {img.shape}"
            )
        r = self.patch_radius
        padded = np.pad(img, ((r, r), (r, r), (0, 0)))
        windows = np.lib.stride_tricks.sliding_window_view(
            padded, (2 * r + 1, 2 * r + 1), axis=(0, 1)
        )
        # (H, W, ch, wh, ww) -> (H*W, wh*ww*ch), matching checkpoint layout
        h, w = img.shape[:2]
        return np.ascontiguousarray(windows.transpose(0, 1, 3, 4, 2)).reshape(
            h * w, self.patch_size
        )

    def _forward_flat(self, x: np.ndarray):
        """Forward on an (N, patch_size) matrix; in-place where possible."""
        layers = self._layers(self.params)
        acts = [x]
        for weight, bias in layers[:-2]:
            z = acts[-1] @ weight
            z += bias
            acts.append(np.tanh(z, out=z))
        emb = acts[-1] @ layers[-2][0]
        emb += layers[-2][1]
        logits = emb @ layers[-1][0]
        logits += layers[-1][1]

        probs = logits - logits.max(axis=1, keepdims=True)
        np.exp(probs, out=probs)
        probs /= probs.sum(axis=1, keepdims=True)
        return emb, probs, acts

    def _forward(self, image: np.ndarray):
        x = self._patches(image)
        emb, probs, acts = self._forward_flat(x)
        h, w = np.asarray(image).shape[:2]
        cache = {"acts": acts, "emb": emb, "shape": (h, w)}
        return (
            emb.reshape(h, w, self.embed_dim),
            probs.reshape(h, w, self.num_classes + 1),
            cache,
        )

    def forward(self, image: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Embeddings (H, W, d) and per-pixel softmax probabilities (H, W, C+1)."""
        emb, probs, _ = self._forward(image)
        return emb, probs

    def backward(
        self,
        image: np.ndarray,
        dlogits: np.ndarray,
        dembed_normalized: np.ndarray,
        cache: dict | None = None,
    ) -> np.ndarray:
        """Flat parameter gradient of a scalar loss with the given upstreams.

        ``dlogits`` is the loss gradient on the head's pre-softmax logits and
        ``dembed_normalized`` the gradient on the L2-normalized embedding; the
        normalization Jacobian is applied here. Pixels with an exactly zero
        embedding only admit a zero upstream.
        """
        if cache is None:
            _, _, cache = self._forward(image)
        h, w = cache["shape"]
        dl = np.asarray(dlogits, dtype=np.float64)
        dn = np.asarray(dembed_normalized, dtype=np.float64)
        if dl.shape != (h, w, self.num_classes + 1):
            raise ValueError(f"dlogits shape {dl.shape} != {(h, w, self.num_classes + 1)}")
        if dn.shape != (h, w, self.embed_dim):
            raise ValueError(f"dembed shape {dn.shape} != {(h, w, self.embed_dim)}")
        return self._backward_flat(
            cache["acts"],
            cache["emb"],
            dl.reshape(h * w, self.num_classes + 1),
            dn.reshape(h * w, self.embed_dim),
        )

    def _backward_flat(
        self, acts: list, emb: np.ndarray, dl: np.ndarray, dn: np.ndarray
    ) -> np.ndarray:
        layers = self._layers(self.params)
        grads = np.zeros_like(self.params)
        slices = self.param_slices()

        # head
        w_head = layers[-1][0]
        gw, gb, _ = slices[-1]
        grads[gw] = (emb.T @ dl).ravel()
        grads[gb] = dl.sum(axis=0)
        demb = dl @ w_head.T

        # pull dembed_normalized back through e / ||e||
        norms = np.linalg.norm(emb, axis=1)
        zero = norms == 0.0
        if np.any(zero) and np.any(dn[zero]):
            raise ValueError("nonzero upstream gradient on a zero embedding")
        inv = np.where(zero, 0.0, 1.0 / np.where(zero, 1.0, norms))
        unit = emb * inv[:, None]
        demb += (dn - (unit * dn).sum(axis=1, keepdims=True) * unit) * inv[:, None]

        # embedding layer (linear)
        gw, gb, _ = slices[-2]
        grads[gw] = (acts[-1].T @ demb).ravel()
        grads[gb] = demb.sum(axis=0)
        da = demb @ layers[-2][0].T

        # tanh body
        for layer_idx in range(len(self.hidden) - 1, -1, -1):
            a_out = acts[layer_idx + 1]
            dz = da
            dz *= 1.0 - a_out * a_out
            gw, gb, _ = slices[layer_idx]
            grads[gw] = (acts[layer_idx].T @ dz).ravel()
            grads[gb] = dz.sum(axis=0)
            da = dz @ layers[layer_idx][0].T

        return grads


def sgd_step(
    params: np.ndarray, grads: np.ndarray, lr: float, weight_decay: float = 0.0
) -> np.ndarray:
    """params - lr * (grads + weight_decay * params).

    Non-finite gradients abort immediately rather than poisoning the run.
    """
    p = np.asarray(params, dtype=np.float64)
    g = np.asarray(grads, dtype=np.float64)
    if p.shape != g.shape:
        raise ValueError(f"params {p.shape} and grads {g.shape} differ")
    if lr < 0:
        raise ValueError(f"lr must be >= 0, got {lr}")
    if weight_decay < 0:
        raise ValueError(f"weight_decay must be >= 0, got {weight_decay}")
    if not np.all(np.isfinite(g)):
        raise FloatingPointError("non-finite gradient in sgd_step")
    return p - lr * (g + weight_decay * p)


def save_checkpoint(net: PixelNet, step: int, path) -> None:
    """JSON header line followed by the raw little-endian float64 parameters."""
    header = {
        "magic": CHECKPOINT_MAGIC,
        "arch": {
            "patch_radius": net.patch_radius,
            "channels": net.channels,
            "hidden": list(net.hidden),
            "embed_dim": net.embed_dim,
            "num_classes": net.num_classes,
        },
        "seed": net.seed,
        "step": int(step),
    }
    with open(path, "wb") as fh:
        fh.write((json.dumps(header) + "\n").encode("utf-8"))
        fh.write(net.params.astype("<f8").tobytes())


def load_checkpoint(path) -> tuple[PixelNet, int]:
    raw = Path(path).read_bytes()
    nl = raw.index(b"\n")
    header = json.loads(raw[:nl].decode("utf-8"))
    if header.get("magic") != CHECKPOINT_MAGIC:
        raise ValueError(f"{path} is not a pixelnet checkpoint")
    arch = header["arch"]
    net = PixelNet(
        patch_radius=arch["patch_radius"],
        channels=arch["channels"],
        hidden=tuple(arch["hidden"]),
        embed_dim=arch["embed_dim"],
        num_classes=arch["num_classes"],
        seed=header["seed"],
        params=np.frombuffer(raw[nl + 1 :], dtype="<f8").astype(np.float64),
    )
    if len(net.params) != net.param_count:
        raise ValueError(
            f"checkpoint holds {len(net.params)} parameters, expected {net.param_count}"
        )
    return net, int(header["step"])
