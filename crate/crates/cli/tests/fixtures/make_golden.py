"""Regenerates the 2x2 encode fixture and its golden packed tensor.

Thermometer: L = ceil(255 / R) lanes per color, round(p / R) ones with halves
rounded up, ones at the high lane indices, channel = color * L + lane.
Packed file: b"FBTN", u32 LE channels/height/width, then per position
ceil(C / 64) u64 LE words, channel c in bit c % 64 of word c // 64.
"""

import struct
from fractions import Fraction
from math import ceil, floor
from pathlib import Path

HERE = Path(__file__).resolve().parent
PIXELS = [
    [(0, 4, 255), (109, 12, 128)],
    [(200, 20, 60), (7, 250, 131)],
]
RESOLUTION = 8


def ones(p, r):
    return floor(Fraction(p, r) + Fraction(1, 2))


def encode(pixels, r):
    length = ceil(255 / r)
    channels = 3 * length
    height, width = len(pixels), len(pixels[0])
    words_per_pos = ceil(channels / 64)
    out = bytearray(b"FBTN")
    out += struct.pack("<III", channels, height, width)
    for row in pixels:
        for px in row:
            bits = [0] * channels
            for color, p in enumerate(px):
                for lane in range(length - ones(p, r), length):
                    bits[color * length + lane] = 1
            for k in range(words_per_pos):
                word = sum(bits[c] << (c - 64 * k) for c in range(64 * k, min(channels, 64 * k + 64)))
                out += struct.pack("<Q", word)
    return bytes(out)


def ppm(pixels):
    height, width = len(pixels), len(pixels[0])
    body = bytes(v for row in pixels for px in row for v in px)
    return b"P6\n%d %d\n255\n" % (width, height) + body


if __name__ == "__main__":
    (HERE / "pixels_2x2.ppm").write_bytes(ppm(PIXELS))
    (HERE / "pixels_2x2_r8.fbtn").write_bytes(encode(PIXELS, RESOLUTION))
