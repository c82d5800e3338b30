#!/usr/bin/env python3
"""Export torchvision VGG-19 conv weights to a PGSVGGW1 archive.

Usage: python tools/export_vgg_weights.py out/vgg19.pgsw

Requires torch + torchvision (downloads the pretrained weights on first use).
The archive feeds `--mode full --vgg-weights <file>`; tiny mode needs no file.
"""
import json
import struct
import sys

# VGG-19 features indices for conv1_1 .. conv4_1 (the slice the loss network
# and encoder share).
CONV_LAYERS = [
    ("conv1_1", 0), ("conv1_2", 2),
    ("conv2_1", 5), ("conv2_2", 7),
    ("conv3_1", 10), ("conv3_2", 12), ("conv3_3", 14), ("conv3_4", 16),
    ("conv4_1", 19),
]

MAGIC = b"PGSVGGW1"
VERSION = "pgs-vgg-v1"


def main() -> int:
    if len(sys.argv) != 2:
        print(__doc__.strip(), file=sys.stderr)
        return 2
    out_path = sys.argv[1]

    import torch
    from torchvision import models

    vgg = models.vgg19(weights=models.VGG19_Weights.IMAGENET1K_V1).features.eval()

    arrays = []
    blobs = []
    offset = 0
    for name, idx in CONV_LAYERS:
        layer = vgg[idx]
        for suffix, tensor in (("weight", layer.weight), ("bias", layer.bias)):
            data = tensor.detach().to(torch.float64).contiguous().numpy()
            raw = data.tobytes()
            arrays.append({
                "name": f"{name}.{suffix}",
                "shape": list(data.shape),
                "offset": offset,
                "size": data.size,
            })
            blobs.append(raw)
            offset += data.size

    header = json.dumps({"version": VERSION, "arrays": arrays}).encode()
    with open(out_path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<Q", len(header)))
        f.write(header)
        for raw in blobs:
            f.write(raw)
    print(f"wrote {out_path} ({offset} parameters)")
    return 0


if __name__ == "__main__":
    sys.exit(main())
