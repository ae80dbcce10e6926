#!/usr/bin/env python3
"""Write an 18-layer residual network state dict as a cmnet tensor table.

    convert_torchvision.py --out resnet18.cmnt [--weights resnet18.pth | --random SEED]

The result is what `train.pretrained` expects. Only conv/bn tensors are kept;
the fc head and num_batches_tracked counters are dropped.
"""
import argparse
import json
import struct
import sys

import numpy as np


def load_state(args):
    import torch
    import torchvision

    if args.weights:
        state = torch.load(args.weights, map_location="cpu", weights_only=True)
        if isinstance(state, dict) and "state_dict" in state:
            state = state["state_dict"]
        return state, args.weights
    torch.manual_seed(args.random)
    return torchvision.models.resnet18(weights=None).state_dict(), f"random:{args.random}"


def write_table(path, tensors, metadata):
    meta = json.dumps(metadata, sort_keys=True).encode()
    with open(path, "wb") as out:
        out.write(b"CMNTTBL1")
        out.write(struct.pack("<IQ", 1, len(meta)))
        out.write(meta)
        out.write(struct.pack("<Q", len(tensors)))
        for key in sorted(tensors):  # loader wants lexicographic order
            arr = np.ascontiguousarray(tensors[key], dtype="<f4")
            raw = key.encode()
            out.write(struct.pack("<I", len(raw)))
            out.write(raw)
            out.write(struct.pack("<BB", 0, arr.ndim))
            out.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
            out.write(arr.tobytes())


def main():
    ap = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("--out", required=True)
    src = ap.add_mutually_exclusive_group(required=True)
    src.add_argument("--weights", help="torch state dict (.pth)")
    src.add_argument("--random", type=int, metavar="SEED", help="untrained weights, for testing")
    args = ap.parse_args()

    state, origin = load_state(args)
    tensors = {
        k: v.detach().cpu().numpy()
        for k, v in state.items()
        if not k.startswith("fc.") and not k.endswith("num_batches_tracked")
    }
    if "conv1.weight" not in tensors or "layer4.1.bn2.running_var" not in tensors:
        sys.exit(f"{origin}: does not look like an 18-layer residual network state dict")
    write_table(args.out, tensors, {"source": origin, "format": "torchvision-resnet18"})
    print(f"wrote {len(tensors)} tensors to {args.out}")


if __name__ == "__main__":
    main()
