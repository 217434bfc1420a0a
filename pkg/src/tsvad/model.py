"""Target-speaker activity network with learnable pseudo-speaker slots.

Forward path: frame encoder -> pseudo-profile bank -> profile augmentation
-> per-speaker detection (shared linear + BLSTM stack) -> joint detection
(speaker-axis self-attention alternating with time-axis BLSTM) -> sigmoid
head. The speaker axis carries no positional encoding anywhere, so the
network accepts any number of profiles and is equivariant to their order;
the pseudo slots are input-independent functions of their own parameters
and exist to pick up speakers the first pass missed.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import ShapeError, Tensor
from .clustering import ProfileSet
from .layers import BLSTM, Linear, sinusoidal_encoding
from .simulate import FrameFeatures


@dataclass(frozen=True)
class ModelConfig:
    feat_dim: int = 32
    embed_dim: int = 32
    profile_dim: int = 32
    isd_hidden: int = 32
    num_pseudo: int = 3
    jsd_blocks: int = 2
    attn_heads: int = 2
    seed: int = 0

    def __post_init__(self):
        if self.num_pseudo < 0:
            raise ValueError("num_pseudo must be >= 0")
        if self.jsd_blocks < 1:
            raise ValueError("jsd_blocks must be >= 1")
        if self.isd_hidden % 2:
            raise ValueError("isd_hidden must be even (bidirectional split)")
        if self.isd_hidden % self.attn_heads:
            raise ValueError("attn_heads must divide isd_hidden")


# "paper-scale" mirrors the published dimensioning (128-dim profiles, five
# pseudo slots); it is a configuration preset, not a trained artifact.
PRESETS = {
    "toy": ModelConfig(),
    "paper-scale": ModelConfig(feat_dim=80, embed_dim=128, profile_dim=128,
                               isd_hidden=128, num_pseudo=5, attn_heads=4),
}


@dataclass
class SpeechActivityPosterior:
    values: Tensor  # (T, S+Z), entries strictly in (0, 1)
    column_roles: list

    @property
    def data(self) -> np.ndarray:
        return self.values.data

    def target_columns(self) -> dict:
        return {role.split(":", 1)[1]: i for i, role in enumerate(self.column_roles)
                if role.startswith("target:")}

    def pseudo_columns(self) -> list:
        return [i for i, role in enumerate(self.column_roles)
                if role.startswith("pseudo:")]


class _JsdBlock:
    def __init__(self, rng, hidden: int, heads: int, prefix: str):
        self.heads = heads
        self.hidden = hidden
        self.wq = Linear(rng, hidden, hidden, f"{prefix}.attn.q")
        self.wk = Linear(rng, hidden, hidden, f"{prefix}.attn.k")
        self.wv = Linear(rng, hidden, hidden, f"{prefix}.attn.v")
        self.wo = Linear(rng, hidden, hidden, f"{prefix}.attn.out")
        self.ffn1 = Linear(rng, hidden, 2 * hidden, f"{prefix}.ffn.l1")
        self.ffn2 = Linear(rng, 2 * hidden, hidden, f"{prefix}.ffn.l2")
        self.blstm = BLSTM(rng, hidden, hidden // 2, f"{prefix}.blstm")

    def _split_heads(self, x: Tensor, T: int, S: int) -> Tensor:
        dh = self.hidden // self.heads
        x = ad.reshape(x, (T, S, self.heads, dh))
        x = ad.transpose(x, (0, 2, 1, 3))
        return ad.reshape(x, (T * self.heads, S, dh))

    def _join_heads(self, x: Tensor, T: int, S: int) -> Tensor:
        dh = self.hidden // self.heads
        x = ad.reshape(x, (T, self.heads, S, dh))
        x = ad.transpose(x, (0, 2, 1, 3))
        return ad.reshape(x, (T, S, self.hidden))

    def __call__(self, x: Tensor) -> Tensor:
        """x: (T, S', F) -> (T, S', F); attention runs across the speaker
        axis per frame (no positional encoding), then a BLSTM along time."""
        T, S, F = x.shape
        if S > 0:
            q = self._split_heads(self.wq(x), T, S)
            k = self._split_heads(self.wk(x), T, S)
            v = self._split_heads(self.wv(x), T, S)
            scale = 1.0 / np.sqrt(F // self.heads)
            scores = ad.mul(ad.bmm(q, ad.transpose(k, (0, 2, 1))), scale)
            ctx = ad.bmm(ad.softmax_rows(scores), v)
            x = ad.add(x, self.wo(self._join_heads(ctx, T, S)))
            x = ad.add(x, self.ffn2(ad.tanh(self.ffn1(x))))
        return self.blstm(x)

    def parameters(self) -> dict:
        params = {}
        for part in (self.wq, self.wk, self.wv, self.wo, self.ffn1, self.ffn2, self.blstm):
            params.update(part.parameters())
        return params


class TsVadModel:
    """Per-speaker voice activity detector conditioned on speaker profiles."""

    def __init__(self, config: ModelConfig):
        self.config = config
        rng = np.random.default_rng(config.seed)
        D, E, P, F = config.feat_dim, config.embed_dim, config.profile_dim, config.isd_hidden

        self.enc1 = Linear(rng, D, E, "encoder.l1", identity_leaning=True)
        self.enc2 = Linear(rng, E, E, "encoder.l2", identity_leaning=True)

        self.positional = sinusoidal_encoding(config.num_pseudo, P)
        if config.num_pseudo > 0:
            self.bank_w = Tensor(np.eye(P) + 0.01 * rng.normal(size=(P, P)),
                                 requires_grad=True)
            self.bank_b = Tensor(np.zeros(P), requires_grad=True)
        else:
            self.bank_w = None
            self.bank_b = None

        self.isd_proj = Linear(rng, E + P, F, "isd.proj")
        self.isd_blstm1 = BLSTM(rng, F, F // 2, "isd.blstm1")
        self.isd_blstm2 = BLSTM(rng, F, F // 2, "isd.blstm2")
        self._seed_detection_structure(rng)
        self.jsd = [_JsdBlock(rng, F, config.attn_heads, f"jsd.block{i}")
                    for i in range(config.jsd_blocks)]
        self.head = Linear(rng, F, 1, "head")

    def _seed_detection_structure(self, rng: np.random.Generator,
                                  a: float = 1.2, kappa: float = 1.5) -> None:
        """Initialize the per-speaker stack so frame-profile agreement is
        computable from step zero.

        The projection emits paired sum/difference channels u_k = a r_k.(e+p),
        v_k = a r_k.(e-p) over shared orthonormal directions r_k; the first
        BLSTM's input and candidate gates each select (u_k + v_k) and
        (u_k - v_k), so their product carries (r_k.e)(r_k.p) -- summed over
        channels, the inner product of frame and profile. Without this
        seeding the bilinear interaction fails to emerge within a desk-scale
        step budget; everything stays fully trainable afterwards.
        """
        E, P, F = self.config.embed_dim, self.config.profile_dim, self.config.isd_hidden
        H = F // 2
        half = F // 2
        r_e = np.linalg.qr(rng.normal(size=(E, half)))[0][:, :half]
        r_p = r_e if P == E else np.linalg.qr(rng.normal(size=(P, half)))[0][:, :half]
        w = 0.02 * rng.normal(size=(E + P, F))
        w[:E, :half] += a * r_e
        w[E:, :half] += a * r_p
        w[:E, half:] += a * r_e
        w[E:, half:] += -a * r_p
        self.isd_proj.w.data = w
        self.isd_proj.b.data[:] = 0.0
        for tag in ("fwd", "bwd"):
            w_ih, w_hh, b = self.isd_blstm1.params[tag]
            wi = 0.02 * rng.normal(size=(F, 4 * H))
            for k in range(min(H, half)):
                wi[k, k] += kappa              # input gate reads u_k + v_k
                wi[half + k, k] += kappa
                wi[k, 3 * H + k] += kappa      # candidate reads u_k - v_k
                wi[half + k, 3 * H + k] += -kappa
            w_ih.data = wi
            w_hh.data = 0.02 * rng.normal(size=w_hh.data.shape)
            bias = np.zeros(4 * H)
            bias[2 * H:3 * H] = 1.5  # output gate starts mostly open
            b.data = bias

    # -- parameter plumbing ------------------------------------------------

    def parameters(self) -> dict:
        params = {}
        for part in (self.enc1, self.enc2):
            params.update(part.parameters())
        if self.bank_w is not None:
            params["bank.w"] = self.bank_w
            params["bank.b"] = self.bank_b
        for part in (self.isd_proj, self.isd_blstm1, self.isd_blstm2):
            params.update(part.parameters())
        for block in self.jsd:
            params.update(block.parameters())
        params.update(self.head.parameters())
        return params

    def load_state(self, state: dict, strict: bool = True) -> list:
        """Copy arrays into matching parameters by name; returns the names
        that were left at their fresh initialization (used when a model with
        pseudo slots starts from a checkpoint trained without them)."""
        params = self.parameters()
        missing = []
        for name, tensor in params.items():
            if name in state:
                arr = np.asarray(state[name], dtype=np.float64)
                if arr.shape != tensor.data.shape:
                    raise ShapeError(f"{name}: checkpoint shape {arr.shape} "
                                     f"!= model shape {tensor.data.shape}")
                tensor.data = arr.copy()
            else:
                missing.append(name)
        if strict and missing:
            raise KeyError(f"checkpoint is missing parameters: {missing}")
        return missing

    def state(self) -> dict:
        return {name: t.data.copy() for name, t in self.parameters().items()}

    def save(self, path_prefix: str) -> None:
        ad.save_tensors(path_prefix + ".petw", self.state())
        with open(path_prefix + ".cfg", "w") as fh:
            for key, value in asdict(self.config).items():
                fh.write(f"{key} = {value}\n")

    @classmethod
    def load(cls, path_prefix: str) -> "TsVadModel":
        fields = {}
        with open(path_prefix + ".cfg") as fh:
            for line in fh:
                if "=" in line:
                    key, value = line.split("=", 1)
                    fields[key.strip()] = int(value.strip())
        model = cls(ModelConfig(**fields))
        model.load_state(ad.load_tensors(path_prefix + ".petw"))
        return model

    # -- forward pieces ------------------------------------------------------

    def encode(self, features) -> Tensor:
        """(T, D) frames -> (T, E) embeddings via a small MLP stand-in for a
        real front-end encoder."""
        frames = features.frames if isinstance(features, FrameFeatures) else features
        frames = np.asarray(frames, dtype=np.float64)
        if frames.ndim != 2 or frames.shape[1] != self.config.feat_dim:
            raise ShapeError(f"expected (T, {self.config.feat_dim}) features, "
                             f"got {frames.shape}")
        return self.enc2(ad.tanh(self.enc1(Tensor(frames))))

    def pseudo_profiles(self) -> Tensor:
        """(Z, P) learnable profiles: positional encoding of a zero input
        pushed through a linear layer. Input-independent by construction."""
        if self.config.num_pseudo == 0:
            return Tensor(np.zeros((0, self.config.profile_dim)))
        pe = Tensor(self.positional)  # zero input + positional encoding
        q = ad.matmul(pe, self.bank_w)
        return ad.add(q, ad.expand_axis(self.bank_b, 0, self.config.num_pseudo))

    def augment(self, profiles) -> tuple[Tensor, list]:
        """Stack target profiles above pseudo profiles: ((S+Z), P)."""
        if isinstance(profiles, ProfileSet):
            mat = profiles.profiles
            labels = list(profiles.speaker_labels)
        else:
            mat = np.asarray(profiles, dtype=np.float64)
            labels = [f"t{i}" for i in range(mat.shape[0])]
        if mat.ndim != 2 or mat.shape[1] != self.config.profile_dim:
            raise ShapeError(f"expected (S, {self.config.profile_dim}) profiles, "
                             f"got {mat.shape}")
        roles = [f"target:{lab}" for lab in labels]
        roles += [f"pseudo:{i}" for i in range(self.config.num_pseudo)]
        q = self.pseudo_profiles()
        if mat.shape[0] == 0:
            return q, roles
        if self.config.num_pseudo == 0:
            return Tensor(mat), roles
        return ad.concat([Tensor(mat), q], axis=0), roles

    def isd_forward(self, embeddings: Tensor, augmented: Tensor) -> Tensor:
        """Detect each speaker independently with shared parameters.

        embeddings (T, E) and profiles ((S+Z), P) -> (S+Z, T, F): the profile
        vector is appended to every frame embedding, projected, and run
        through two BLSTM layers.
        """
        T = embeddings.shape[0]
        S = augmented.shape[0]
        frames = ad.expand_axis(embeddings, 1, S)     # (T, S, E)
        profs = ad.expand_axis(augmented, 0, T)       # (T, S, P)
        x = ad.concat([frames, profs], axis=2)
        x = self.isd_proj(x)                          # (T, S, F)
        x = self.isd_blstm1(x)
        x = self.isd_blstm2(x)
        return ad.transpose(x, (1, 0, 2))             # (S, T, F)

    def jsd_forward(self, stacked: Tensor) -> Tensor:
        """(S+Z, T, F) -> (T, S+Z) activity posteriors.

        Each block applies speaker-axis self-attention per frame followed by
        a time-axis BLSTM per speaker; a linear + sigmoid head finishes.
        """
        x = ad.transpose(stacked, (1, 0, 2))          # (T, S, F)
        for block in self.jsd:
            x = block(x)
        T, S, _ = x.shape
        logits = ad.reshape(self.head(x), (T, S))
        return ad.sigmoid(logits)

    def forward(self, features, profiles) -> SpeechActivityPosterior:
        embeddings = self.encode(features)
        augmented, roles = self.augment(profiles)
        stacked = self.isd_forward(embeddings, augmented)
        posterior = self.jsd_forward(stacked)
        return SpeechActivityPosterior(values=posterior, column_roles=roles)
