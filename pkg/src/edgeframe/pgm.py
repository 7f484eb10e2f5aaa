"""Binary PGM (P5) reading and writing, maxval 255 only."""

from __future__ import annotations

from dataclasses import dataclass, field


class PgmError(Exception):
    pass


@dataclass(frozen=True)
class GrayImage:
    width: int
    height: int
    pixels: bytes = field(repr=False)  # row-major, 8-bit

    def __post_init__(self) -> None:
        if self.width < 1 or self.height < 1:
            raise ValueError("image dimensions must be >= 1")
        if len(self.pixels) != self.width * self.height:
            raise ValueError(f"expected {self.width * self.height} pixels, "
                             f"got {len(self.pixels)}")


def _read_token(data: bytes, pos: int) -> tuple[bytes, int]:
    # skip whitespace and '#' comments between header tokens
    while pos < len(data):
        c = data[pos:pos + 1]
        if c == b"#":
            nl = data.find(b"\n", pos)
            pos = len(data) if nl < 0 else nl + 1
        elif c.isspace():
            pos += 1
        else:
            break
    start = pos
    while pos < len(data) and not data[pos:pos + 1].isspace():
        pos += 1
    if start == pos:
        raise PgmError("truncated header")
    return data[start:pos], pos


def decode_pgm(data: bytes) -> GrayImage:
    magic, pos = _read_token(data, 0)
    if magic != b"P5":
        raise PgmError(f"not a binary PGM (magic {magic!r})")
    w_tok, pos = _read_token(data, pos)
    h_tok, pos = _read_token(data, pos)
    max_tok, pos = _read_token(data, pos)
    try:
        width, height, maxval = int(w_tok), int(h_tok), int(max_tok)
    except ValueError:
        raise PgmError("non-numeric header field") from None
    if maxval != 255:
        raise PgmError(f"unsupported maxval {maxval}, only 255 is handled")
    pos += 1  # single whitespace byte after maxval
    pixels = data[pos:pos + width * height]
    if len(pixels) != width * height:
        raise PgmError(f"pixel data truncated: {len(pixels)} of {width * height} bytes")
    return GrayImage(width, height, bytes(pixels))


def encode_pgm(image: GrayImage) -> bytes:
    header = f"P5\n{image.width} {image.height}\n255\n".encode("ascii")
    return header + image.pixels


def read_pgm(path: str) -> GrayImage:
    with open(path, "rb") as fh:
        return decode_pgm(fh.read())


def write_pgm(image: GrayImage, path: str) -> None:
    with open(path, "wb") as fh:
        fh.write(encode_pgm(image))
