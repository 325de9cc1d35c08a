"""Bit-exact load/save for datasets, Gaussian checkpoints, motion fields and images.

Dataset layout on disk:
    frames/%05d.png   8-bit RGB
    depth/%05d.pfm    optional, little-endian float32, scale -1.0, 0 = invalid
    cameras.json      {"frames": [{fx,fy,cx,cy,width,height,R,t,time}, ...]}
    points3d.ply      binary PLY, float xyz + uchar rgb

Gaussian checkpoints are binary PLY with float32 vertex properties
x,y,z, rot_0..rot_3, log_scale_0..2, opacity_logit, mask_logit, sh_0..sh_{3B-1}
(sh index = channel * B + band). Motion-field checkpoints use the "AMSF"
binary layout described in save_motion_field. All float payloads round-trip
bit-exactly; PNG quantization to 8 bits is the single lossy edge.
"""

import json
import struct
import warnings
from pathlib import Path

import numpy as np
import torch
from PIL import Image

from .motion import CoefficientNet, DCTBasis, MotionField, SceneNormalizer, TriplaneEncoder
from .scene import Camera, Dataset, Frame, GaussianSet

_PLY_TYPES = {"float": "<f4", "double": "<f8", "uchar": "u1", "uint8": "u1",
              "int": "<i4", "uint": "<u4", "short": "<i2", "ushort": "<u2"}


def write_ply(path, props, comments=()):
    """Write a single binary_little_endian 'vertex' element.

    props: ordered list of (name, 1-D numpy array); arrays share a length and
    must have dtypes covered by the PLY scalar types.
    """
    names = [n for n, _ in props]
    arrays = [np.ascontiguousarray(a) for _, a in props]
    count = len(arrays[0]) if arrays else 0
    inv_types = {np.dtype(v): k for k, v in _PLY_TYPES.items()}
    lines = ["ply", "format binary_little_endian 1.0"]
    lines += [f"comment {c}" for c in comments]
    lines.append(f"element vertex {count}")
    rec_fields = []
    for name, arr in zip(names, arrays):
        if arr.dtype not in inv_types:
            raise ValueError(f"unsupported PLY dtype {arr.dtype} for {name}")
        lines.append(f"property {inv_types[arr.dtype]} {name}")
        rec_fields.append((name, arr.dtype))
    lines.append("end_header")
    rec = np.empty(count, dtype=rec_fields)
    for name, arr in zip(names, arrays):
        rec[name] = arr
    with open(path, "wb") as f:
        f.write(("\n".join(lines) + "\n").encode("ascii"))
        f.write(rec.tobytes())


def read_ply(path):
    """Read a binary_little_endian PLY vertex element into {name: array}."""
    path = Path(path)
    with open(path, "rb") as f:
        if f.readline().strip() != b"ply":
            raise ValueError(f"malformed PLY {path.name}: missing magic")
        fmt = f.readline().split()
        if len(fmt) < 2 or fmt[1] != b"binary_little_endian":
            raise ValueError(f"malformed PLY {path.name}: unsupported format {fmt!r}")
        count = None
        fields = []
        while True:
            line = f.readline()
            if not line:
                raise ValueError(f"malformed PLY {path.name}: unterminated header")
            tokens = line.split()
            if not tokens or tokens[0] == b"comment":
                continue
            if tokens[0] == b"element":
                if tokens[1] != b"vertex":
                    raise ValueError(f"malformed PLY {path.name}: only vertex elements supported")
                count = int(tokens[2])
            elif tokens[0] == b"property":
                tname = tokens[1].decode()
                if tname == "list":
                    raise ValueError(f"malformed PLY {path.name}: list properties unsupported")
                if tname not in _PLY_TYPES:
                    raise ValueError(f"unknown property layout in {path.name}: type {tname}")
                fields.append((tokens[2].decode(), _PLY_TYPES[tname]))
            elif tokens[0] == b"end_header":
                break
        if count is None:
            raise ValueError(f"malformed PLY {path.name}: no vertex element")
        rec = np.frombuffer(f.read(), dtype=fields, count=count)
    return {name: rec[name].copy() for name, _ in fields}


def write_pfm(path, data):
    """Grayscale PFM, little-endian (scale header -1.0), rows bottom-up."""
    data = np.asarray(data, dtype=np.float32)
    with open(path, "wb") as f:
        f.write(b"Pf\n")
        f.write(f"{data.shape[1]} {data.shape[0]}\n".encode("ascii"))
        f.write(b"-1.0\n")
        f.write(np.ascontiguousarray(data[::-1]).tobytes())


def read_pfm(path):
    with open(path, "rb") as f:
        header = f.readline().strip()
        if header != b"Pf":
            raise ValueError(f"unsupported PFM header {header!r} in {path}")
        width, height = map(int, f.readline().split())
        scale = float(f.readline())
        data = np.frombuffer(f.read(), dtype="<f4" if scale < 0 else ">f4",
                             count=width * height).reshape(height, width)
    return data[::-1].copy()


def save_image(path, image):
    """Float [0,1] (H, W, 3) -> 8-bit PNG."""
    if isinstance(image, torch.Tensor):
        image = image.detach().numpy()
    arr = np.clip(np.asarray(image) * 255.0 + 0.5, 0, 255).astype(np.uint8)
    Image.fromarray(arr).save(path)


def load_image(path):
    arr = np.asarray(Image.open(path).convert("RGB"), dtype=np.float32) / 255.0
    return torch.from_numpy(arr)


def _camera_to_json(camera: Camera):
    return {
        "fx": camera.fx, "fy": camera.fy, "cx": camera.cx, "cy": camera.cy,
        "width": camera.width, "height": camera.height,
        "R": [float(v) for v in camera.rotation_w2c.double().reshape(-1)],
        "t": [float(v) for v in camera.translation_w2c.double()],
        "time": camera.time_index,
    }


def _camera_from_json(entry, source, index):
    rot = torch.tensor(entry["R"], dtype=torch.float64).reshape(3, 3)
    err = (rot @ rot.T - torch.eye(3, dtype=torch.float64)).abs().max().item()
    if err > 1e-3:
        raise ValueError(f"{source}: camera {index} rotation fails orthonormality by {err:.2e}")
    return Camera(
        fx=float(entry["fx"]), fy=float(entry["fy"]),
        cx=float(entry["cx"]), cy=float(entry["cy"]),
        width=int(entry["width"]), height=int(entry["height"]),
        rotation_w2c=rot,
        translation_w2c=torch.tensor(entry["t"], dtype=torch.float64),
        time_index=int(entry["time"]),
    )


def save_dataset(dataset: Dataset, path):
    """Write the standard dataset layout."""
    path = Path(path)
    (path / "frames").mkdir(parents=True, exist_ok=True)
    has_depth = any(f.depth is not None for f in dataset.frames)
    if has_depth:
        (path / "depth").mkdir(exist_ok=True)
    for i, frame in enumerate(dataset.frames):
        save_image(path / "frames" / f"{i:05d}.png", frame.image.numpy())
        if frame.depth is not None:
            write_pfm(path / "depth" / f"{i:05d}.pfm", frame.depth.numpy())
    with open(path / "cameras.json", "w", encoding="utf-8") as f:
        json.dump({"total_frames": dataset.total_frames,
                   "frames": [_camera_to_json(c) for c in dataset.cameras]}, f, indent=1)
    pts = dataset.init_points.numpy().astype(np.float32)
    cols = np.clip(dataset.init_colors.numpy() * 255.0 + 0.5, 0, 255).astype(np.uint8)
    write_ply(path / "points3d.ply", [
        ("x", pts[:, 0]), ("y", pts[:, 1]), ("z", pts[:, 2]),
        ("red", cols[:, 0]), ("green", cols[:, 1]), ("blue", cols[:, 2]),
    ])


def load_dataset(path) -> Dataset:
    path = Path(path)
    cam_file = path / "cameras.json"
    if not cam_file.exists():
        raise FileNotFoundError(f"missing cameras.json in {path}")
    with open(cam_file, encoding="utf-8") as f:
        payload = json.load(f)
    entries = payload["frames"]
    frame_files = sorted((path / "frames").glob("*.png"))
    if len(frame_files) != len(entries):
        raise ValueError(f"cameras.json lists {len(entries)} cameras but "
                         f"{len(frame_files)} frame images exist in {path / 'frames'}")
    for i, ff in enumerate(frame_files):
        if ff.name != f"{i:05d}.png":
            raise ValueError(f"frame indices not contiguous: unexpected {ff.name}")

    cameras = [_camera_from_json(e, str(cam_file), i) for i, e in enumerate(entries)]
    depth_dir = path / "depth"
    frames = []
    for i, ff in enumerate(frame_files):
        image = load_image(ff)
        depth = None
        pfm = depth_dir / f"{i:05d}.pfm"
        if pfm.exists():
            depth = torch.from_numpy(read_pfm(pfm))
        frames.append(Frame(image=image, depth=depth, time_index=cameras[i].time_index))

    ply_file = path / "points3d.ply"
    if ply_file.exists():
        props = read_ply(ply_file)
        try:
            pts = np.stack([props["x"], props["y"], props["z"]], axis=1)
            cols = np.stack([props["red"], props["green"], props["blue"]], axis=1)
        except KeyError as e:
            raise ValueError(f"malformed PLY {ply_file.name}: missing property {e}") from e
        init_points = torch.from_numpy(pts.astype(np.float32))
        init_colors = torch.from_numpy(cols.astype(np.float32) / 255.0)
    else:
        init_points = torch.zeros(0, 3)
        init_colors = torch.zeros(0, 3)

    total = int(payload.get("total_frames", len(frames)))
    return Dataset(frames=frames, cameras=cameras, init_points=init_points,
                   init_colors=init_colors, total_frames=total).validate()


_GAUSSIAN_FIXED = ["x", "y", "z", "rot_0", "rot_1", "rot_2", "rot_3",
                   "log_scale_0", "log_scale_1", "log_scale_2",
                   "opacity_logit", "mask_logit"]


def save_gaussians(gaussians: GaussianSet, path):
    g = gaussians
    pos = g.positions.detach().float().numpy()
    rot = g.rotation_params.detach().float().numpy()
    scl = g.log_scales.detach().float().numpy()
    b = g.colors.shape[2]
    sh = g.colors.detach().float().numpy().reshape(-1, 3 * b)
    props = [("x", pos[:, 0]), ("y", pos[:, 1]), ("z", pos[:, 2])]
    props += [(f"rot_{i}", rot[:, i]) for i in range(4)]
    props += [(f"log_scale_{i}", scl[:, i]) for i in range(3)]
    props += [("opacity_logit", g.opacity_logits.detach().float().numpy()),
              ("mask_logit", g.mask_logits.detach().float().numpy())]
    props += [(f"sh_{j}", sh[:, j]) for j in range(3 * b)]
    write_ply(path, props, comments=["dctsplat gaussian checkpoint"])


def load_gaussians(path) -> GaussianSet:
    props = read_ply(path)
    missing = [k for k in _GAUSSIAN_FIXED if k not in props]
    if missing:
        raise ValueError(f"unknown property layout in {Path(path).name}: missing {missing}")
    sh_names = sorted((k for k in props if k.startswith("sh_")), key=lambda s: int(s[3:]))
    if len(sh_names) % 3 != 0 or len(sh_names) == 0:
        raise ValueError(f"unknown property layout in {Path(path).name}: "
                         f"{len(sh_names)} sh_* properties")
    b = len(sh_names) // 3
    if b not in (1, 4):
        raise ValueError(f"unsupported SH coefficient count {b} in {Path(path).name}")
    known = set(_GAUSSIAN_FIXED) | set(sh_names)
    extra = [k for k in props if k not in known]
    if extra:
        warnings.warn(f"ignoring unknown properties in {Path(path).name}: {extra}",
                      RuntimeWarning)

    def col(name):
        return torch.from_numpy(np.ascontiguousarray(props[name]))

    n = len(props["x"])
    sh = torch.stack([col(name) for name in sh_names], dim=1).reshape(n, 3, b)
    return GaussianSet(
        positions=torch.stack([col("x"), col("y"), col("z")], dim=1),
        rotation_params=torch.stack([col(f"rot_{i}") for i in range(4)], dim=1),
        log_scales=torch.stack([col(f"log_scale_{i}") for i in range(3)], dim=1),
        opacity_logits=col("opacity_logit"),
        colors=sh,
        mask_logits=col("mask_logit"),
    )


_MOTION_MAGIC = b"AMSF"
_MOTION_VERSION = 1


def save_motion_field(field: MotionField, path):
    """Binary layout: magic "AMSF", u32 version, u32 Rp, u32 Cf, u32 K, u32 T,
    u32 layer count then (u32 in, u32 out) per layer, normalizer center /
    half_extent / margin as f32, then planes (xy, xz, yz) and per-layer
    weight + bias payloads as little-endian f32 in declaration order."""
    enc = field.encoder
    net = field.net
    sizes = net.layer_sizes
    with open(path, "wb") as f:
        f.write(_MOTION_MAGIC)
        f.write(struct.pack("<5I", _MOTION_VERSION, enc.resolution, enc.channels,
                            field.basis.K, field.basis.T))
        f.write(struct.pack("<I", len(sizes)))
        for fin, fout in sizes:
            f.write(struct.pack("<2I", fin, fout))
        norm = field.normalizer
        f.write(struct.pack("<3f", *norm.center.tolist()))
        f.write(struct.pack("<3f", *norm.half_extent.tolist()))
        f.write(struct.pack("<f", norm.margin))
        for name in ("plane_xy", "plane_xz", "plane_yz"):
            f.write(getattr(enc, name).detach().float().numpy().tobytes())
        for layer in net.layers:
            f.write(layer.weight.detach().float().numpy().tobytes())
            f.write(layer.bias.detach().float().numpy().tobytes())


def load_motion_field(path) -> MotionField:
    with open(path, "rb") as f:
        if f.read(4) != _MOTION_MAGIC:
            raise ValueError(f"not a motion field file: {path}")
        version, rp, cf, k, t = struct.unpack("<5I", f.read(20))
        if version != _MOTION_VERSION:
            raise ValueError(f"unsupported motion field version {version} in {path}")
        (n_layers,) = struct.unpack("<I", f.read(4))
        sizes = [struct.unpack("<2I", f.read(8)) for _ in range(n_layers)]
        center = torch.tensor(struct.unpack("<3f", f.read(12)))
        half = torch.tensor(struct.unpack("<3f", f.read(12)))
        (margin,) = struct.unpack("<f", f.read(4))

        def read_array(shape):
            n_vals = int(np.prod(shape))
            return torch.from_numpy(
                np.frombuffer(f.read(4 * n_vals), dtype="<f4").copy().reshape(shape))

        normalizer = SceneNormalizer(center=center, half_extent=half, margin=margin)
        # K is header data, deliberately not recomputed from T.
        basis = DCTBasis.create(t, k=k)
        field = MotionField(normalizer, basis, plane_resolution=rp, plane_channels=cf,
                            hidden=sizes[0][1] if sizes else 64)
        with torch.no_grad():
            for name in ("plane_xy", "plane_xz", "plane_yz"):
                getattr(field.encoder, name).copy_(read_array((rp, rp, cf)))
            if [tuple(s) for s in field.net.layer_sizes] != [tuple(s) for s in sizes]:
                raise ValueError(f"unexpected layer sizes {sizes} in {path}")
            for layer, (fin, fout) in zip(field.net.layers, sizes):
                layer.weight.copy_(read_array((fout, fin)))
                layer.bias.copy_(read_array((fout,)))
    return field


def save_training_log(path, rows, header):
    with open(path, "w", encoding="utf-8") as f:
        f.write(",".join(header) + "\n")
        for row in rows:
            f.write(",".join(str(v) for v in row) + "\n")
