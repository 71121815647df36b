"""Enumerate every parameter tensor of the Stable Diffusion v1 UNet.

Writes sdv1-dims.csv with one row per tensor: path, element count, whether
the tensor is a cross-attention projection weight (attn2 to_q, to_k, to_v,
to_out.0), and its (d, k) extents as used in x @ W.

Architecture: block_out_channels (320, 640, 1280, 1280), two layers per
down block, three per up block, 8 heads, cross-attention width 768,
4 latent channels, time embedding 1280, GroupNorm on every resnet.
"""

import csv
import sys

CH = (320, 640, 1280, 1280)
CROSS = 768
TEMB = 1280
LATENT = 4

rows = []


def add(path, *shape, eligible=False, dk=None):
    n = 1
    for s in shape:
        n *= s
    d, k = dk if dk else (0, 0)
    rows.append((path, n, "true" if eligible else "false", d, k))


def conv(path, cin, cout, ks):
    add(f"{path}.weight", cout, cin, ks, ks)
    add(f"{path}.bias", cout)


def linear(path, din, dout, bias=True, eligible=False):
    add(f"{path}.weight", dout, din, eligible=eligible, dk=(din, dout))
    if bias:
        add(f"{path}.bias", dout)


def norm(path, c):
    add(f"{path}.weight", c)
    add(f"{path}.bias", c)


def resnet(path, cin, cout):
    norm(f"{path}.norm1", cin)
    conv(f"{path}.conv1", cin, cout, 3)
    linear(f"{path}.time_emb_proj", TEMB, cout)
    norm(f"{path}.norm2", cout)
    conv(f"{path}.conv2", cout, cout, 3)
    if cin != cout:
        conv(f"{path}.conv_shortcut", cin, cout, 1)


def transformer(path, c):
    norm(f"{path}.norm", c)
    conv(f"{path}.proj_in", c, c, 1)
    b = f"{path}.transformer_blocks.0"
    norm(f"{b}.norm1", c)
    for name in ("to_q", "to_k", "to_v"):
        linear(f"{b}.attn1.{name}", c, c, bias=False)
    linear(f"{b}.attn1.to_out.0", c, c)
    norm(f"{b}.norm2", c)
    linear(f"{b}.attn2.to_q", c, c, bias=False, eligible=True)
    linear(f"{b}.attn2.to_k", CROSS, c, bias=False, eligible=True)
    linear(f"{b}.attn2.to_v", CROSS, c, bias=False, eligible=True)
    linear(f"{b}.attn2.to_out.0", c, c, eligible=True)
    norm(f"{b}.norm3", c)
    linear(f"{b}.ff.net.0.proj", c, 8 * c)
    linear(f"{b}.ff.net.2", 4 * c, c)
    conv(f"{path}.proj_out", c, c, 1)


conv("conv_in", LATENT, CH[0], 3)
linear("time_embedding.linear_1", CH[0], TEMB)
linear("time_embedding.linear_2", TEMB, TEMB)

skips = [CH[0]]
cin = CH[0]
for i, cout in enumerate(CH):
    attn = i < 3
    for j in range(2):
        resnet(f"down_blocks.{i}.resnets.{j}", cin if j == 0 else cout, cout)
        if attn:
            transformer(f"down_blocks.{i}.attentions.{j}", cout)
        skips.append(cout)
    if i < 3:
        conv(f"down_blocks.{i}.downsamplers.0.conv", cout, cout, 3)
        skips.append(cout)
    cin = cout

resnet("mid_block.resnets.0", CH[-1], CH[-1])
transformer("mid_block.attentions.0", CH[-1])
resnet("mid_block.resnets.1", CH[-1], CH[-1])

rev = CH[::-1]
prev = rev[0]
for i, cout in enumerate(rev):
    attn = i > 0
    for j in range(3):
        skip = skips.pop()
        resnet(f"up_blocks.{i}.resnets.{j}", (prev if j == 0 else cout) + skip, cout)
        if attn:
            transformer(f"up_blocks.{i}.attentions.{j}", cout)
    if i < 3:
        conv(f"up_blocks.{i}.upsamplers.0.conv", cout, cout, 3)
    prev = cout

norm("conv_norm_out", CH[0])
conv("conv_out", CH[0], LATENT, 3)

assert not skips
total = sum(r[1] for r in rows)
eligible = [r for r in rows if r[2] == "true"]
lora4 = sum(4 * (r[3] + r[4]) for r in eligible)

out = sys.argv[1] if len(sys.argv) > 1 else "sdv1-dims.csv"
with open(out, "w", newline="") as f:
    w = csv.writer(f, lineterminator="\n")
    w.writerow(["path", "params", "adapter_eligible", "d", "k"])
    w.writerows(rows)

print(f"tensors={len(rows)} total={total} eligible={len(eligible)} lora_r4={lora4} fraction={lora4 / total:.6f}")
