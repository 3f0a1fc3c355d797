"""Writes the golden FVOL/FRWT files from the byte layout alone."""
import struct


def fvol(dims, channels, dtype, spacing, payload):
    out = b"FVOL" + bytes([1])
    out += struct.pack("<5I", *dims, channels, dtype)
    out += struct.pack("<3f", *spacing)
    return out + payload


def f32s(values):
    return struct.pack("<%df" % len(values), *values)


with open("volume.fvol", "wb") as f:
    f.write(fvol((3, 2, 1), 1, 0, (1.5, 1.5, 3.15), f32s([0.0, 0.5, -1.25, 2.0, 3.75, -0.0625])))
with open("field.fvol", "wb") as f:
    f.write(fvol((2, 1, 1), 3, 0, (2.0, 1.0, 0.5), f32s([1.0, -1.0, 0.25, 0.5, -2.0, 4.0])))
with open("labels.fvol", "wb") as f:
    f.write(fvol((2, 2, 1), 1, 1, (1.5, 1.5, 3.15), bytes([0, 1, 2, 3])))

# Two-scale network: channels [1, 2], corr_radius 1, time_embed_dim 2, mlp_hidden 2, seed 7.
entries = [
    ("enc.1.conv1.weight", [1, 1, 3, 3, 3]),
    ("enc.1.conv1.bias", [1]),
    ("enc.1.conv2.weight", [1, 1, 3, 3, 3]),
    ("enc.1.conv2.bias", [1]),
    ("enc.2.conv1.weight", [2, 1, 3, 3, 3]),
    ("enc.2.conv1.bias", [2]),
    ("enc.2.conv2.weight", [2, 2, 3, 3, 3]),
    ("enc.2.conv2.bias", [2]),
    ("time.1.weight", [1, 2]),
    ("time.1.bias", [1]),
    ("time.2.weight", [2, 2]),
    ("time.2.bias", [2]),
    # Finer scales also see the coarser stage's hidden features.
    ("dec.1.fc1.weight", [2, 27 + 2 * 1 + 2]),
    ("dec.1.fc1.bias", [2]),
    ("dec.1.fc2.weight", [3, 2]),
    ("dec.1.fc2.bias", [3]),
    ("dec.2.fc1.weight", [2, 27 + 2 * 2]),
    ("dec.2.fc1.bias", [2]),
    ("dec.2.fc2.weight", [3, 2]),
    ("dec.2.fc2.bias", [3]),
]
out = b"FRWT" + bytes([1])
out += struct.pack("<I", 2) + struct.pack("<2I", 1, 2) + struct.pack("<3I", 1, 2, 2) + struct.pack("<Q", 7)
out += struct.pack("<I", len(entries))
k = 0
for name, shape in entries:
    out += struct.pack("<I", len(name)) + name.encode()
    out += struct.pack("<I", len(shape)) + struct.pack("<%dI" % len(shape), *shape)
    n = 1
    for d in shape:
        n *= d
    out += f32s([(k + i - 100) * 0.125 for i in range(n)])
    k += n
with open("tiny.frwt", "wb") as f:
    f.write(out)
