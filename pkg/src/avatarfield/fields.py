"""Canonical-space fields: mapping networks, the SDF (template distance plus a
learned offset), the texture field and the gradient normal field."""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field

import numpy as np

from .body import BodyModel, body_model_from_dict, body_model_to_dict
from .meshdist import MeshDistance
from .triplane import TriPlane, new_triplane

LRELU_SLOPE = 0.2
OUTPUTS = ("linear", "lrelu", "tanh", "sigmoid")


def _f32(a) -> np.ndarray:
    return np.asarray(a, dtype=np.float32).astype(float)


def _act(x, kind):
    if kind == "lrelu":
        return np.where(x >= 0, x, LRELU_SLOPE * x)
    if kind == "tanh":
        return np.tanh(x)
    if kind == "sigmoid":
        return 0.5 * (1.0 + np.tanh(0.5 * x))
    return x


def _act_grad(x, y, kind):
    """Derivative of the activation given its input x and output y."""
    if kind == "lrelu":
        return np.where(x >= 0, 1.0, LRELU_SLOPE)
    if kind == "tanh":
        return 1.0 - y * y
    if kind == "sigmoid":
        return y * (1.0 - y)
    return np.ones_like(x)


@dataclass
class DecoderMLP:
    """Fully connected net with leaky-ReLU hidden layers. When ``cond_dim`` > 0
    each hidden layer's pre-activation ``a`` becomes ``a * (1 + s) + t`` where
    (s, t) are affine in the conditioning vector."""

    weights: list  # (out, in) per layer
    biases: list
    cond_dim: int = 0
    mod_scale: list = field(default_factory=list)  # (width, cond_dim) per hidden layer
    mod_shift: list = field(default_factory=list)
    output: str = "linear"

    def __post_init__(self):
        for k in range(1, len(self.weights)):
            if self.weights[k].shape[1] != self.weights[k - 1].shape[0]:
                raise ValueError("layer shapes do not chain")
        if self.output not in OUTPUTS:
            raise ValueError(f"unknown output activation {self.output!r}")

    @property
    def in_dim(self) -> int:
        return self.weights[0].shape[1]

    @property
    def out_dim(self) -> int:
        return self.weights[-1].shape[0]

    @property
    def widths(self) -> list[int]:
        return [self.in_dim] + [w.shape[0] for w in self.weights]

    @classmethod
    def init(cls, widths, seed: int, cond_dim: int = 0, output: str = "linear",
             mod_gain: float = 0.5, out_gain: float = 1.0) -> "DecoderMLP":
        """He-style init; ``out_gain`` scales the last layer only."""
        rng = np.random.default_rng(seed)
        weights, biases, ms, mt = [], [], [], []
        gain = np.sqrt(2.0 / (1.0 + LRELU_SLOPE**2))
        for k in range(len(widths) - 1):
            fan_in, fan_out = widths[k], widths[k + 1]
            g = gain * (out_gain if k == len(widths) - 2 else 1.0)
            weights.append(_f32(rng.standard_normal((fan_out, fan_in)) * g / np.sqrt(fan_in)))
            biases.append(np.zeros(fan_out))
        if cond_dim:
            for k in range(len(widths) - 2):
                ms.append(_f32(rng.standard_normal((widths[k + 1], cond_dim)) * mod_gain / np.sqrt(cond_dim)))
                mt.append(_f32(rng.standard_normal((widths[k + 1], cond_dim)) * mod_gain / np.sqrt(cond_dim)))
        return cls(weights, biases, cond_dim, ms, mt, output)

    @classmethod
    def zeros(cls, widths, cond_dim: int = 0, output: str = "linear") -> "DecoderMLP":
        n = len(widths) - 1
        return cls(
            [np.zeros((widths[k + 1], widths[k])) for k in range(n)],
            [np.zeros(widths[k + 1]) for k in range(n)],
            cond_dim,
            [np.zeros((widths[k + 1], cond_dim)) for k in range(n - 1)] if cond_dim else [],
            [np.zeros((widths[k + 1], cond_dim)) for k in range(n - 1)] if cond_dim else [],
            output,
        )

    def _modulation(self, k, cond):
        if not self.cond_dim or k >= len(self.mod_scale):
            return None, None
        return self.mod_scale[k] @ cond, self.mod_shift[k] @ cond

    def _check(self, x, cond):
        if x.shape[1] != self.in_dim:
            raise ValueError(f"decoder expects {self.in_dim} inputs, got {x.shape[1]}")
        if self.cond_dim and (cond is None or len(cond) != self.cond_dim):
            raise ValueError(f"decoder expects a conditioning vector of length {self.cond_dim}")

    def forward(self, x, cond=None) -> np.ndarray:
        h = np.atleast_2d(np.asarray(x, dtype=float))
        self._check(h, cond)
        last = len(self.weights) - 1
        for k, (W, b) in enumerate(zip(self.weights, self.biases)):
            a = h @ W.T + b
            s, t = self._modulation(k, cond)
            if s is not None:
                a = a * (1.0 + s) + t
            h = _act(a, "lrelu" if k < last else self.output)
        return h

    def forward_jacobian(self, x, cond, jac_in):
        """Forward pass carrying d(activations)/d(point) alongside; ``jac_in`` is
        (P, in, 3). Returns (output (P, out), jacobian (P, out, 3))."""
        h = np.atleast_2d(np.asarray(x, dtype=float))
        self._check(h, cond)
        # (3, P, width) so each layer is one matmul
        J = np.ascontiguousarray(np.moveaxis(jac_in, 2, 0))
        last = len(self.weights) - 1
        for k, (W, b) in enumerate(zip(self.weights, self.biases)):
            a = h @ W.T + b
            Ja = J @ W.T
            s, t = self._modulation(k, cond)
            if s is not None:
                a = a * (1.0 + s) + t
                Ja *= 1.0 + s
            kind = "lrelu" if k < last else self.output
            h = _act(a, kind)
            J = Ja * _act_grad(a, h, kind)
        return h, np.moveaxis(J, 0, 2)

    def activation_pattern(self, x, cond=None) -> np.ndarray:
        """Sign of every leaky-ReLU pre-activation, (P, hidden units) bool. The
        network is smooth between two points sharing a pattern."""
        h = np.atleast_2d(np.asarray(x, dtype=float))
        self._check(h, cond)
        signs = []
        last = len(self.weights) - 1
        for k, (W, b) in enumerate(zip(self.weights, self.biases)):
            a = h @ W.T + b
            s, t = self._modulation(k, cond)
            if s is not None:
                a = a * (1.0 + s) + t
            kind = "lrelu" if k < last else self.output
            if kind == "lrelu":
                signs.append(a > 0)
            h = _act(a, kind)
        return np.concatenate(signs, axis=1) if signs else np.zeros((len(h), 0), bool)

    def arrays(self) -> list[np.ndarray]:
        return [*self.weights, *self.biases, *self.mod_scale, *self.mod_shift]

    def spec(self) -> dict:
        return {"widths": self.widths, "cond_dim": self.cond_dim, "output": self.output}

    @classmethod
    def from_arrays(cls, spec: dict, arrays: list) -> "DecoderMLP":
        n = len(spec["widths"]) - 1
        m = n - 1 if spec["cond_dim"] else 0
        it = iter(arrays)
        W = [next(it) for _ in range(n)]
        b = [next(it) for _ in range(n)]
        ms = [next(it) for _ in range(m)]
        mt = [next(it) for _ in range(m)]
        return cls(W, b, spec["cond_dim"], ms, mt, spec["output"])


def mapping(z, net: DecoderMLP) -> np.ndarray:
    """Map a latent code to its intermediate latent."""
    z = np.asarray(z, dtype=float).reshape(-1)
    if len(z) != net.in_dim:
        raise ValueError(f"latent length {len(z)} != mapping input width {net.in_dim}")
    return net.forward(z[None])[0]


@dataclass(frozen=True)
class LatentCode:
    z_geo: np.ndarray
    z_tex: np.ndarray

    @classmethod
    def sample(cls, dim: int, geo_seed: int, tex_seed: int) -> "LatentCode":
        return cls(_f32(np.random.default_rng(_sub(geo_seed, 10)).standard_normal(dim)),
                   _f32(np.random.default_rng(_sub(tex_seed, 11)).standard_normal(dim)))

    def with_texture(self, z_tex) -> "LatentCode":
        return LatentCode(self.z_geo, np.asarray(z_tex, dtype=float))

    def vector(self) -> np.ndarray:
        return np.concatenate([self.z_geo, self.z_tex])

    @classmethod
    def from_vector(cls, v, dim: int) -> "LatentCode":
        v = np.asarray(v, dtype=float)
        return cls(v[:dim].copy(), v[dim:].copy())


@dataclass(frozen=True)
class IntermediateLatent:
    w_geo: np.ndarray
    w_tex: np.ndarray


@dataclass(frozen=True)
class FieldConfig:
    triplane_res: int = 64
    triplane_channels: int = 16
    aggregation: str = "sum"
    triplane_scale: float = 0.5
    triplane_init: str = "smooth"
    latent_dim: int = 16
    mapping_layers: int = 8
    mapping_width: int = 64
    decoder_layers: int = 3
    decoder_width: int = 64
    offset_fraction: float = 0.1  # of the template bounding-box diagonal
    mod_gain: float = 0.5
    offset_gain: float = 0.25  # last geometry layer; keeps tanh out of saturation at init


class FieldSet:
    """Geometry and texture branches over a canonical template.

    ``sdf(x) = template_distance(x) + offset_scale * tanh(geo_decoder(T_geo(x); w_geo))``
    """

    def __init__(self, body: BodyModel, tri_geo: TriPlane, tri_tex: TriPlane,
                 geo_decoder: DecoderMLP, tex_decoder: DecoderMLP,
                 map_geo: DecoderMLP, map_tex: DecoderMLP, offset_scale: float,
                 meta: dict | None = None):
        self.body = body
        self.template = MeshDistance(body.rest_vertices, body.faces)
        self.tri_geo, self.tri_tex = tri_geo, tri_tex
        self.geo_decoder, self.tex_decoder = geo_decoder, tex_decoder
        self.map_geo, self.map_tex = map_geo, map_tex
        self.offset_scale = float(offset_scale)
        self.meta = dict(meta or {})
        if geo_decoder.in_dim != tri_geo.feature_dim or tex_decoder.in_dim != tri_tex.feature_dim:
            raise ValueError("decoder input width must equal the triplane feature width")
        if geo_decoder.cond_dim != map_geo.out_dim:
            raise ValueError("geometry decoder conditioning must match w_geo width")
        if tex_decoder.cond_dim != map_geo.out_dim + map_tex.out_dim:
            raise ValueError("texture decoder conditioning must match (w_geo, w_tex) width")
        if geo_decoder.out_dim != 1 or tex_decoder.out_dim != 3:
            raise ValueError("decoders must output 1 (offset) and 3 (rgb) values")

    @classmethod
    def generate(cls, body: BodyModel, cfg: FieldConfig = FieldConfig(), geo_seed: int = 0,
                 tex_seed: int = 1, bounds=None) -> "FieldSet":
        """Seeded FieldSet. The geometry seed drives every geometry-branch
        parameter, the texture seed every texture-branch parameter."""
        if bounds is None:
            lo, hi = body.rest_vertices.min(0), body.rest_vertices.max(0)
            c, h = (lo + hi) / 2, (hi - lo).max() / 2 * 1.1
            bounds = (c - h, c + h)
        C, Wd = cfg.triplane_channels, cfg.mapping_width
        tri_geo = new_triplane(cfg.triplane_res, C, bounds, cfg.triplane_init, seed=_sub(geo_seed, 0),
                               scale=cfg.triplane_scale, aggregation=cfg.aggregation)
        tri_tex = new_triplane(cfg.triplane_res, C, bounds, cfg.triplane_init, seed=_sub(tex_seed, 0),
                               scale=cfg.triplane_scale, aggregation=cfg.aggregation)
        F = tri_geo.feature_dim
        hidden = [cfg.decoder_width] * (cfg.decoder_layers - 1)
        geo_dec = DecoderMLP.init([F, *hidden, 1], _sub(geo_seed, 1), cond_dim=Wd, output="tanh",
                                  mod_gain=cfg.mod_gain, out_gain=cfg.offset_gain)
        tex_dec = DecoderMLP.init([F, *hidden, 3], _sub(tex_seed, 1), cond_dim=2 * Wd,
                                  output="sigmoid", mod_gain=cfg.mod_gain)
        mwidths = [cfg.latent_dim] + [Wd] * cfg.mapping_layers
        map_geo = DecoderMLP.init(mwidths, _sub(geo_seed, 2), output="lrelu")
        map_tex = DecoderMLP.init(mwidths, _sub(tex_seed, 2), output="lrelu")
        lo, hi = body.rest_vertices.min(0), body.rest_vertices.max(0)
        scale = float(np.float32(cfg.offset_fraction * np.linalg.norm(hi - lo)))
        return cls(body, tri_geo, tri_tex, geo_dec, tex_dec, map_geo, map_tex, scale,
                   meta={"geo_seed": geo_seed, "tex_seed": tex_seed})

    def with_zero_offset(self) -> "FieldSet":
        """Same FieldSet with the geometry decoder zeroed: sdf == template distance."""
        dec = DecoderMLP.zeros(self.geo_decoder.widths, self.geo_decoder.cond_dim, "tanh")
        return self.replace(geo_decoder=dec)

    def replace(self, **kw) -> "FieldSet":
        args = dict(body=self.body, tri_geo=self.tri_geo, tri_tex=self.tri_tex,
                    geo_decoder=self.geo_decoder, tex_decoder=self.tex_decoder,
                    map_geo=self.map_geo, map_tex=self.map_tex,
                    offset_scale=self.offset_scale, meta=self.meta)
        args.update(kw)
        return FieldSet(**args)

    @property
    def latent_dim(self) -> int:
        return self.map_geo.in_dim

    def map_latents(self, z: LatentCode) -> IntermediateLatent:
        return IntermediateLatent(mapping(z.z_geo, self.map_geo), mapping(z.z_tex, self.map_tex))

    def template_signed_distance(self, x) -> np.ndarray:
        return self.template.signed_distance(x)

    def offset(self, w_geo, x) -> np.ndarray:
        return self.offset_scale * self.geo_decoder.forward(self.tri_geo.sample(x), w_geo)[:, 0]

    def sdf(self, w_geo, x) -> np.ndarray:
        x = np.atleast_2d(np.asarray(x, dtype=float))
        return self.template.signed_distance(x) + self.offset(w_geo, x)

    def sdf_and_grad(self, w_geo, x):
        x = np.atleast_2d(np.asarray(x, dtype=float))
        d, g = self.template.signed_distance_and_grad(x)
        feat, jac, _ = self.tri_geo.sample_with_grad(x)
        out, J = self.geo_decoder.forward_jacobian(feat, w_geo, jac)
        return d + self.offset_scale * out[:, 0], g + self.offset_scale * J[:, 0, :]

    def color(self, w_geo, w_tex, x) -> np.ndarray:
        cond = np.concatenate([w_geo, w_tex])
        return self.tex_decoder.forward(self.tri_tex.sample(x), cond)

    def normal(self, w_geo, x, mode: str = "analytic", h: float | None = None) -> np.ndarray:
        """Raw (unnormalised) SDF gradient."""
        if mode == "analytic":
            return self.sdf_and_grad(w_geo, x)[1]
        if mode == "finite_difference":
            step = 0.5 * float(self.tri_geo.cell_size.min()) if h is None else h
            return central_gradient(lambda p: self.sdf(w_geo, p), x, step)
        raise ValueError(f"unknown normal mode {mode!r}")

    def smooth_stencil(self, w_geo, x, h: float) -> np.ndarray:
        """True where d is a single smooth piece over the central-difference
        stencil x +- h e_k: same triplane cell, same decoder activation pattern
        and same closest template feature at all seven points. Only such points
        give a meaningful analytic-vs-FD comparison."""
        x = np.atleast_2d(np.asarray(x, dtype=float))
        stencil = [x]
        for k in range(3):
            e = np.zeros(3)
            e[k] = h
            stencil += [x + e, x - e]

        def signature(p):
            u = (p - self.tri_geo.lo) / self.tri_geo.cell_size
            cell = np.floor(u).astype(np.int64)
            on_border = np.any(np.abs(u - np.round(u)) < 1e-9, axis=1)
            feat = self.tri_geo.sample(p)
            act = self.geo_decoder.activation_pattern(feat, w_geo)
            _, face, _, region = self.template.closest(p)
            return cell, act, face, region, on_border

        ref = signature(x)
        ok = ~ref[4]
        for p in stencil[1:]:
            sig = signature(p)
            ok &= ~sig[4]
            ok &= np.all(sig[0] == ref[0], axis=1) & np.all(sig[1] == ref[1], axis=1)
            ok &= (sig[2] == ref[2]) & (sig[3] == ref[3])
        return ok

    # -- snapshot ------------------------------------------------------------

    def to_bytes(self, latents: LatentCode | None = None) -> bytes:
        meta = {
            "body": body_model_to_dict(self.body),
            "body_name": self.body.name,
            "offset_scale": self.offset_scale,
            "geo_decoder": self.geo_decoder.spec(),
            "tex_decoder": self.tex_decoder.spec(),
            "map_geo": self.map_geo.spec(),
            "map_tex": self.map_tex.spec(),
            "meta": self.meta,
            "has_latents": latents is not None,
        }
        arrays = [*self.geo_decoder.arrays(), *self.tex_decoder.arrays(),
                  *self.map_geo.arrays(), *self.map_tex.arrays()]
        if latents is not None:
            arrays += [latents.z_geo, latents.z_tex]
        head = json.dumps(meta, sort_keys=True).encode()
        tri = [self.tri_geo.to_bytes(), self.tri_tex.to_bytes()]
        out = [_SNAP_MAGIC, struct.pack("<I", len(head)), head]
        for t in tri:
            out += [struct.pack("<Q", len(t)), t]
        out.append(struct.pack("<I", len(arrays)))
        out += [_pack_array(a) for a in arrays]
        return b"".join(out)

    @classmethod
    def from_bytes(cls, data: bytes):
        """Returns (FieldSet, LatentCode or None)."""
        if data[:4] != _SNAP_MAGIC:
            raise ValueError("not a FieldSet snapshot")
        pos = 4
        (n,) = struct.unpack_from("<I", data, pos)
        pos += 4
        meta = json.loads(data[pos:pos + n])
        pos += n
        tris = []
        for _ in range(2):
            (n,) = struct.unpack_from("<Q", data, pos)
            pos += 8
            tris.append(TriPlane.from_bytes(data[pos:pos + n]))
            pos += n
        (count,) = struct.unpack_from("<I", data, pos)
        pos += 4
        arrays = []
        for _ in range(count):
            a, pos = _unpack_array(data, pos)
            arrays.append(a)
        nets = []
        for key in ("geo_decoder", "tex_decoder", "map_geo", "map_tex"):
            spec = meta[key]
            n_layers = len(spec["widths"]) - 1
            n_arr = 2 * n_layers + (2 * (n_layers - 1) if spec["cond_dim"] else 0)
            nets.append(DecoderMLP.from_arrays(spec, arrays[:n_arr]))
            arrays = arrays[n_arr:]
        body = body_model_from_dict(meta["body"], name=meta.get("body_name", ""))
        fs = cls(body, tris[0], tris[1], *nets, offset_scale=meta["offset_scale"], meta=meta["meta"])
        latents = LatentCode(arrays[0], arrays[1]) if meta["has_latents"] else None
        return fs, latents


_SNAP_MAGIC = b"FSN1"


def _pack_array(a) -> bytes:
    a = np.asarray(a)
    return struct.pack("<I", a.ndim) + struct.pack(f"<{a.ndim}I", *a.shape) + a.astype("<f4").tobytes()


def _unpack_array(data, pos):
    (ndim,) = struct.unpack_from("<I", data, pos)
    pos += 4
    shape = struct.unpack_from(f"<{ndim}I", data, pos)
    pos += 4 * ndim
    n = int(np.prod(shape)) if ndim else 1
    a = np.frombuffer(data, dtype="<f4", count=n, offset=pos).astype(float).reshape(shape)
    return a, pos + 4 * n


def _sub(seed: int, stream: int) -> np.random.SeedSequence:
    return np.random.SeedSequence([int(seed), stream])


def central_gradient(f, x, h: float) -> np.ndarray:
    """Central-difference gradient of a batched scalar field."""
    x = np.atleast_2d(np.asarray(x, dtype=float))
    g = np.empty_like(x)
    for k in range(3):
        e = np.zeros(3)
        e[k] = h
        g[:, k] = (f(x + e) - f(x - e)) / (2 * h)
    return g


class SphereField:
    """Exact SDF of a sphere; stands in for a FieldSet where an analytic field
    is needed (same ``sdf`` / ``sdf_and_grad`` / ``normal`` surface)."""

    def __init__(self, radius: float = 0.5, center=(0.0, 0.0, 0.0), scale: float = 1.0):
        self.radius = radius
        self.center = np.asarray(center, dtype=float)
        self.scale = scale

    def sdf(self, w_geo, x) -> np.ndarray:
        x = np.atleast_2d(x)
        return self.scale * (np.linalg.norm(x - self.center, axis=1) - self.radius)

    def sdf_and_grad(self, w_geo, x):
        x = np.atleast_2d(np.asarray(x, dtype=float))
        r = x - self.center
        n = np.linalg.norm(r, axis=1)
        return self.scale * (n - self.radius), self.scale * r / np.maximum(n, 1e-300)[:, None]

    def normal(self, w_geo, x, mode: str = "analytic", h: float = 1e-5) -> np.ndarray:
        if mode == "analytic":
            return self.sdf_and_grad(w_geo, x)[1]
        return central_gradient(lambda p: self.sdf(w_geo, p), x, h)
