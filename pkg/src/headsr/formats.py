"""On-disk formats: PPM/PGM/PFM/PNG images, OBJ meshes, GSET/PRIR binaries.

Binary containers are little-endian. GSET layout:
    b"GSET" | version u32 | N u32 | position f32 (N,3) | rotation f32 (N,4)
    | log_scale f32 (N,3) | opacity_logit f32 (N,) | color_logit f32 (N,3)
    [ b"BIND" | face index u32 (N,) ]
A trailing BIND section marks a local-space (bound) set.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np
from PIL import Image

from .errors import SerializationError
from .gaussians import GaussianSet

GSET_MAGIC = b"GSET"
BIND_MAGIC = b"BIND"
PRIR_MAGIC = b"PRIR"
GSET_VERSION = 1
PRIR_VERSION = 1


# --- portable images -------------------------------------------------------

def write_ppm(path, img: np.ndarray):
    """P6 8-bit from float image in [0, 1]."""
    img = np.asarray(img)
    if img.ndim != 3 or img.shape[2] != 3:
        raise SerializationError("PPM writer expects HxWx3")
    data = np.clip(np.rint(img * 255.0), 0, 255).astype(np.uint8)
    with open(path, "wb") as f:
        f.write(b"P6\n%d %d\n255\n" % (img.shape[1], img.shape[0]))
        f.write(data.tobytes())


def _read_pnm_header(f, magic):
    if f.read(2) != magic:
        raise SerializationError(f"not a {magic.decode()} file")
    fields = []
    while len(fields) < 3:
        line = f.readline()
        if not line:
            raise SerializationError("truncated PNM header")
        line = line.split(b"#")[0]
        fields.extend(line.split())
    w, h, maxval = (int(v) for v in fields[:3])
    return w, h, maxval


def read_ppm(path) -> np.ndarray:
    with open(path, "rb") as f:
        w, h, maxval = _read_pnm_header(f, b"P6")
        data = np.frombuffer(f.read(w * h * 3), dtype=np.uint8)
    if data.size != w * h * 3:
        raise SerializationError("truncated PPM payload")
    return data.reshape(h, w, 3).astype(np.float64) / maxval


def write_pgm(path, mask: np.ndarray):
    """P5 8-bit; boolean masks map to {0, 255}."""
    mask = np.asarray(mask)
    if mask.dtype == bool:
        data = np.where(mask, 255, 0).astype(np.uint8)
    else:
        data = np.clip(np.rint(mask), 0, 255).astype(np.uint8)
    with open(path, "wb") as f:
        f.write(b"P5\n%d %d\n255\n" % (mask.shape[1], mask.shape[0]))
        f.write(data.tobytes())


def read_pgm(path) -> np.ndarray:
    with open(path, "rb") as f:
        w, h, maxval = _read_pnm_header(f, b"P5")
        data = np.frombuffer(f.read(w * h), dtype=np.uint8)
    if data.size != w * h:
        raise SerializationError("truncated PGM payload")
    return data.reshape(h, w)


def write_pfm(path, arr: np.ndarray):
    """Grayscale PFM, little-endian, bottom-to-top rows per convention."""
    arr = np.asarray(arr, dtype=np.float32)
    if arr.ndim != 2:
        raise SerializationError("PFM writer expects a 2D array")
    with open(path, "wb") as f:
        f.write(b"Pf\n%d %d\n-1.0\n" % (arr.shape[1], arr.shape[0]))
        f.write(arr[::-1].tobytes())


def read_pfm(path) -> np.ndarray:
    with open(path, "rb") as f:
        if f.readline().strip() != b"Pf":
            raise SerializationError("not a grayscale PFM")
        w, h = (int(v) for v in f.readline().split())
        scale = float(f.readline())
        dtype = "<f4" if scale < 0 else ">f4"
        data = np.frombuffer(f.read(w * h * 4), dtype=dtype)
    if data.size != w * h:
        raise SerializationError("truncated PFM payload")
    return data.reshape(h, w)[::-1].astype(np.float64)


def write_raw_float(path, arr: np.ndarray):
    """f32 payload with an 8-byte (width u32, height u32) LE header."""
    arr = np.asarray(arr, dtype=np.float32)
    with open(path, "wb") as f:
        f.write(struct.pack("<II", arr.shape[1], arr.shape[0]))
        f.write(arr.tobytes())


def read_raw_float(path) -> np.ndarray:
    with open(path, "rb") as f:
        w, h = struct.unpack("<II", f.read(8))
        data = np.frombuffer(f.read(w * h * 4), dtype="<f4")
    if data.size != w * h:
        raise SerializationError("truncated raw float payload")
    return data.reshape(h, w).astype(np.float64)


def write_png(path, img: np.ndarray):
    img = np.asarray(img)
    data = np.clip(np.rint(img * 255.0), 0, 255).astype(np.uint8)
    Image.fromarray(data).save(path, format="PNG")


def read_png(path) -> np.ndarray:
    return np.asarray(Image.open(path), dtype=np.float64) / 255.0


# --- meshes ----------------------------------------------------------------

def write_obj(path, vertices: np.ndarray, triangles: np.ndarray):
    with open(path, "w") as f:
        for v in np.asarray(vertices, dtype=np.float64):
            f.write(f"v {v[0]!r} {v[1]!r} {v[2]!r}\n")
        for t in np.asarray(triangles, dtype=np.int64):
            f.write(f"f {t[0] + 1} {t[1] + 1} {t[2] + 1}\n")


def read_obj(path):
    verts, tris = [], []
    with open(path) as f:
        for line in f:
            parts = line.split()
            if not parts:
                continue
            if parts[0] == "v":
                verts.append([float(x) for x in parts[1:4]])
            elif parts[0] == "f":
                tris.append([int(x.split("/")[0]) - 1 for x in parts[1:4]])
    if not verts:
        raise SerializationError("OBJ file has no vertices")
    return np.array(verts, dtype=np.float64), np.array(tris, dtype=np.int64)


# --- splat sets ------------------------------------------------------------

def gset_to_bytes(gset: GaussianSet) -> bytes:
    n = len(gset)
    out = [GSET_MAGIC, struct.pack("<II", GSET_VERSION, n)]
    for arr in (gset.position, gset.rotation, gset.log_scale, gset.opacity_logit, gset.color_logit):
        out.append(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    if gset.binding is not None:
        out.append(BIND_MAGIC)
        out.append(np.ascontiguousarray(gset.binding, dtype="<u4").tobytes())
    return b"".join(out)


def gset_from_bytes(buf: bytes) -> GaussianSet:
    if buf[:4] != GSET_MAGIC:
        raise SerializationError("bad GSET magic")
    version, n = struct.unpack("<II", buf[4:12])
    if version != GSET_VERSION:
        raise SerializationError(f"unsupported GSET version {version}")
    off = 12
    arrays = []
    for dim in (3, 4, 3, 1, 3):
        count = n * dim
        arrays.append(np.frombuffer(buf, dtype="<f4", count=count, offset=off).astype(np.float64))
        off += count * 4
    binding = None
    if len(buf) >= off + 4 and buf[off : off + 4] == BIND_MAGIC:
        off += 4
        binding = np.frombuffer(buf, dtype="<u4", count=n, offset=off).astype(np.int64)
        off += n * 4
    pos, rot, ls, op, col = arrays
    return GaussianSet(
        pos.reshape(n, 3), rot.reshape(n, 4), ls.reshape(n, 3), op, col.reshape(n, 3),
        "local" if binding is not None else "global", binding,
    )


def write_gset(path, gset: GaussianSet):
    Path(path).write_bytes(gset_to_bytes(gset))


def read_gset(path) -> GaussianSet:
    return gset_from_bytes(Path(path).read_bytes())


def gset_to_json_dict(gset: GaussianSet) -> dict:
    d = {
        "space": gset.space,
        "n": len(gset),
        "position": gset.position.tolist(),
        "rotation": gset.rotation.tolist(),
        "log_scale": gset.log_scale.tolist(),
        "opacity_logit": gset.opacity_logit.tolist(),
        "color_logit": gset.color_logit.tolist(),
    }
    if gset.binding is not None:
        d["binding"] = gset.binding.tolist()
    return d


# --- prior container -------------------------------------------------------

def write_prior(path, prior):
    """PRIR: magic | version u32 | json u32+utf8 | mean GSET u32+blob
    | basis f32 row-major | component_scale f32."""
    header = {
        "latent_dim": int(prior.basis.shape[1]),
        "flat_dim": int(prior.basis.shape[0]),
        "layout": prior.layout.to_json_dict(),
        "group_scales": {k: float(v) for k, v in prior.group_scales.items()},
        "head_config": prior.head.config.to_json_dict(),
        "beta": [float(v) for v in prior.beta],
        "seed": int(prior.seed),
    }
    hj = json.dumps(header, sort_keys=True).encode()
    mean_set = prior.mean_set()
    blob = gset_to_bytes(mean_set)
    with open(path, "wb") as f:
        f.write(PRIR_MAGIC)
        f.write(struct.pack("<I", PRIR_VERSION))
        f.write(struct.pack("<I", len(hj)))
        f.write(hj)
        f.write(struct.pack("<I", len(blob)))
        f.write(blob)
        f.write(np.ascontiguousarray(prior.basis, dtype="<f4").tobytes())
        f.write(np.ascontiguousarray(prior.component_scale, dtype="<f4").tobytes())


def read_prior(path):
    from .headmodel import HeadConfig, build_synthetic_head
    from .prior import AttributeLayout, GenerativePrior

    buf = Path(path).read_bytes()
    if buf[:4] != PRIR_MAGIC:
        raise SerializationError("bad PRIR magic")
    version = struct.unpack("<I", buf[4:8])[0]
    if version != PRIR_VERSION:
        raise SerializationError(f"unsupported PRIR version {version}")
    off = 8
    (hlen,) = struct.unpack("<I", buf[off : off + 4])
    off += 4
    header = json.loads(buf[off : off + hlen].decode())
    off += hlen
    (blen,) = struct.unpack("<I", buf[off : off + 4])
    off += 4
    mean_set = gset_from_bytes(buf[off : off + blen])
    off += blen
    a = header["flat_dim"]
    d = header["latent_dim"]
    basis = np.frombuffer(buf, dtype="<f4", count=a * d, offset=off).astype(np.float64).reshape(a, d)
    off += a * d * 4
    comp = np.frombuffer(buf, dtype="<f4", count=d, offset=off).astype(np.float64)
    head = build_synthetic_head(HeadConfig.from_json_dict(header["head_config"]))
    layout = AttributeLayout.from_json_dict(header["layout"])
    return GenerativePrior.from_serialized(
        head=head,
        beta=np.array(header["beta"], dtype=np.float64),
        mean_set=mean_set,
        basis=basis,
        component_scale=comp,
        layout=layout,
        group_scales=header["group_scales"],
        seed=header["seed"],
    )


# --- avatar bundles ---------------------------------------------------------

def save_avatar(directory, avatar, name: str = "avatar"):
    """GSET+BIND binary plus a manifest tying it to the head parameters."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    gset_file = f"{name}.gset"
    write_gset(directory / gset_file, avatar.gaussians)
    manifest = {
        "schema_version": 1,
        "gset": gset_file,
        "head_config": avatar.head.config.to_json_dict(),
        "beta": [float(v) for v in avatar.beta],
    }
    if avatar.latent is not None:
        manifest["latent"] = [float(v) for v in avatar.latent]
    write_json(directory / f"{name}.json", manifest)
    return directory / f"{name}.json"


def load_avatar(manifest_path):
    from .headmodel import HeadConfig, build_synthetic_head
    from .prior import AvatarModel

    manifest_path = Path(manifest_path)
    manifest = read_json(manifest_path)
    gset = read_gset(manifest_path.parent / manifest["gset"])
    if gset.binding is None:
        raise SerializationError("avatar GSET is missing its BIND section")
    head = build_synthetic_head(HeadConfig.from_json_dict(manifest["head_config"]))
    latent = manifest.get("latent")
    return AvatarModel(
        gset,
        head,
        np.array(manifest["beta"], dtype=np.float64),
        latent=None if latent is None else np.array(latent, dtype=np.float64),
    )


# --- json helpers ----------------------------------------------------------

def write_json(path, obj):
    """Deterministic JSON: sorted keys, fixed separators, trailing newline."""
    with open(path, "w") as f:
        json.dump(obj, f, sort_keys=True, indent=2)
        f.write("\n")


def read_json(path):
    with open(path) as f:
        return json.load(f)
