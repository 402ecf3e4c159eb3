import struct

import numpy as np
import pytest

from sparsetern import tern1
from sparsetern.linalg import DenseTernary
from sparsetern.weightgen import Generator, WeightSpec, generate


def test_header_layout():
    spec = WeightSpec(0x0102030405060708, 9, 2, 5, 0.25, Generator.HASH)
    data = tern1.encode(spec)
    assert data[:5] == b"TERN1"
    fields = struct.unpack_from("<7Qd", data, 5)
    assert fields == (0x0102030405060708, 9, 2, 5, 1, 0, 0, 0.25)
    assert len(data) == tern1.HEADER_SIZE + 2 * 2


def test_two_bit_codes():
    spec = WeightSpec(0, 0, 1, 5, 0.5)
    data = tern1.encode(spec, DenseTernary([[0, 1, -1, 1, -1]]))
    # entries 0..3 -> 00 01 11 01 (LSB first) = 0b01_11_01_00; entry 4 -> 11
    assert data[tern1.HEADER_SIZE:] == bytes([0b01110100, 0b00000011])


@pytest.mark.parametrize("gen,n,m", [(Generator.STREAM, 0, 0), (Generator.HASH, 0, 0),
                                     (Generator.STRUCTURED, 2, 4)])
def test_round_trip(tmp_path, gen, n, m):
    spec = WeightSpec(77, 3, 13, 36, 0.6, gen, n, m)
    path = tmp_path / "m.tern1"
    tern1.save(path, spec)
    spec2, mat = tern1.load(path)
    assert spec2 == spec
    assert mat == generate(spec)


def test_truncated_payload_reports_offset():
    data = tern1.encode(WeightSpec(1, 1, 4, 8, 0.5))
    with pytest.raises(tern1.Tern1Error) as exc:
        tern1.decode(data[:-3])
    assert exc.value.offset == len(data) - 3


def test_truncated_header():
    data = tern1.encode(WeightSpec(1, 1, 4, 8, 0.5))
    with pytest.raises(tern1.Tern1Error) as exc:
        tern1.decode(data[:20])
    assert exc.value.offset == 20


def test_bad_magic():
    with pytest.raises(tern1.Tern1Error) as exc:
        tern1.decode(b"TERX1" + bytes(70))
    assert exc.value.offset == 3


def test_invalid_code_reports_entry_byte():
    data = bytearray(tern1.encode(WeightSpec(1, 1, 3, 8, 1.0)))
    data[tern1.HEADER_SIZE + 2 * 2 + 1] = 0b00100000  # row 2, entry 6 -> code 10
    with pytest.raises(tern1.Tern1Error) as exc:
        tern1.decode(bytes(data))
    assert exc.value.offset == tern1.HEADER_SIZE + 5


def test_nonzero_padding_rejected():
    data = bytearray(tern1.encode(WeightSpec(1, 1, 1, 5, 1.0)))
    data[-1] = 0b01000000
    with pytest.raises(tern1.Tern1Error):
        tern1.decode(bytes(data))


def test_trailing_bytes_rejected():
    data = tern1.encode(WeightSpec(1, 1, 2, 4, 0.5))
    with pytest.raises(tern1.Tern1Error) as exc:
        tern1.decode(data + b"\0")
    assert exc.value.offset == len(data)


def test_text_format():
    m = DenseTernary([[1, 0, -1], [0, 0, 1]])
    text = tern1.to_text(m)
    assert text == "+0-\n00+\n"
    assert tern1.from_text(text) == m


def test_text_all_zero_at_t_one():
    text = tern1.to_text(generate(WeightSpec(3, 0, 4, 6, 1.0)))
    assert set(text) == {"0", "\n"}


def test_stats():
    s = tern1.stats(DenseTernary([[1, 1, 0, -1]]))
    assert s["sparsity"] == 0.25 and s["plus_fraction"] == pytest.approx(2 / 3)
    assert tern1.stats(DenseTernary(np.zeros((2, 2))))["plus_fraction"] == 0.0
