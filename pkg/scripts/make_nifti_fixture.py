"""Write the 4x4x4 NIfTI-1 fixtures under tests/data with plain struct packing.

Voxel (x, y, z) holds x + 10 y + 100 z (scaled by 0.5 in the float32 file),
stored x-fastest as the format requires. Independent of the package reader.
"""
import struct
import sys
from pathlib import Path

OUT = Path(__file__).resolve().parent.parent / "tests" / "data"


def value(x, y, z):
    return x + 10 * y + 100 * z


def header(endian, datatype, bitpix, dims):
    hdr = bytearray(348)
    struct.pack_into(endian + "i", hdr, 0, 348)
    struct.pack_into(endian + "8h", hdr, 40, len(dims), *dims, *([1] * (7 - len(dims))))
    struct.pack_into(endian + "h", hdr, 70, datatype)
    struct.pack_into(endian + "h", hdr, 72, bitpix)
    struct.pack_into(endian + "8f", hdr, 76, 1, 1, 1, 1, 1, 1, 1, 1)
    struct.pack_into(endian + "f", hdr, 108, 352.0)
    hdr[344:348] = b"n+1\x00"
    return bytes(hdr) + b"\x00" * 4


def write(name, endian, datatype, fmt, bitpix, scale):
    n = 4
    voxels = [value(x, y, z) * scale for z in range(n) for y in range(n) for x in range(n)]
    body = struct.pack(endian + fmt * len(voxels), *voxels)
    (OUT / name).write_bytes(header(endian, datatype, bitpix, (n, n, n)) + body)


def main():
    OUT.mkdir(parents=True, exist_ok=True)
    write("cube_int16.nii", "<", 4, "h", 16, 1)
    write("cube_float32.nii", "<", 16, "f", 32, 0.5)
    write("cube_float32_be.nii", ">", 16, "f", 32, 0.5)
    print(f"fixtures written to {OUT}", file=sys.stderr)


if __name__ == "__main__":
    main()
