"""Reference pooled features from torchvision's efficientnet_b0.

Usage:
  cargo run --release -p tajweed-core --example backbone_oracle_inputs -- /tmp/oracle
  python3 scripts/backbone_oracle.py /tmp/oracle/backbone.safetensors \
      crates/core/tests/fixtures/backbone/pooled_torch.f32

Loads the exported `features.*` state dict into torchvision's model (eval
mode), runs the `input` image stored next to it in input.safetensors and writes the 1280 globally pooled
features as little-endian f32.
"""

import sys
from pathlib import Path

import numpy as np
import torch
import torchvision
from safetensors.torch import load_file


def main():
    tensors = load_file(sys.argv[1])
    image = load_file(str(Path(sys.argv[1]).with_name("input.safetensors")))["input"]
    model = torchvision.models.efficientnet_b0(weights=None)
    missing, unexpected = model.load_state_dict(tensors, strict=False)
    missing = [k for k in missing if not k.endswith("num_batches_tracked") and not k.startswith("classifier.")]
    assert not missing and not unexpected, (missing, unexpected)
    model.eval()
    with torch.no_grad():
        pooled = torch.flatten(model.avgpool(model.features(image)), 1)[0]
    pooled.numpy().astype("<f4").tofile(sys.argv[2])
    print(f"norm {pooled.norm():.6f} max {pooled.abs().max():.6f}")


if __name__ == "__main__":
    main()
