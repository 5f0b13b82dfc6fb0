"""32-bit range coder with carry propagation.

Frequencies are integers summing to ``2**precision`` (precision <= 16).  The
encoder keeps a 33-bit ``low`` and resolves carries through a cached byte
plus a count of pending 0xFF bytes.  The decoder mirrors every
normalization, so it consumes exactly the bytes the encoder wrote and a
short stream is detected as truncation instead of being silently padded.
"""

from bisect import bisect_right

from ..errors import BitstreamError

TOP = 1 << 24
MASK32 = 0xFFFFFFFF


class RangeEncoder:
    def __init__(self):
        self.low = 0
        self.range = MASK32
        self._cache = 0
        self._pending = 1
        self._out = bytearray()

    def _shift_low(self):
        low = self.low
        if low < 0xFF000000 or low > MASK32:
            carry = low >> 32
            byte = self._cache
            while True:
                self._out.append((byte + carry) & 0xFF)
                byte = 0xFF
                self._pending -= 1
                if self._pending == 0:
                    break
            self._cache = (low >> 24) & 0xFF
        self._pending += 1
        self.low = (low & 0x00FFFFFF) << 8

    def encode(self, cum, freq, precision):
        """Narrow the interval to ``[cum, cum + freq) / 2**precision``."""
        r = self.range >> precision
        self.low += r * cum
        self.range = r * freq
        while self.range < TOP:
            self.range <<= 8
            self._shift_low()

    def encode_bits(self, value, nbits):
        """Write ``nbits`` raw bits (equiprobable), most significant chunk first."""
        while nbits > 0:
            take = min(nbits, 16)
            nbits -= take
            self.encode((value >> nbits) & ((1 << take) - 1), 1, take)

    def finish(self):
        for _ in range(5):
            self._shift_low()
        # First byte is the initial zero cache; it carries no information.
        return bytes(self._out[1:])


class RangeDecoder:
    def __init__(self, data):
        self._data = data
        self._pos = 0
        self.range = MASK32
        self.code = 0
        for _ in range(4):
            self.code = (self.code << 8) | self._next()

    def _next(self):
        if self._pos >= len(self._data):
            raise BitstreamError("truncated payload: range decoder ran out of bytes")
        b = self._data[self._pos]
        self._pos += 1
        return b

    @property
    def consumed(self):
        return self._pos

    def decode(self, cumulative, precision):
        """Decode one symbol given the cumulative table ``[0, c1, ..., 2**precision]``."""
        r = self.range >> precision
        value = self.code // r
        top = (1 << precision) - 1
        if value > top:
            value = top
        s = bisect_right(cumulative, value) - 1
        lo = cumulative[s]
        self.code -= r * lo
        self.range = r * (cumulative[s + 1] - lo)
        if self.range == 0 or self.code >= self.range:
            raise BitstreamError("corrupted payload: decoded value outside symbol interval")
        while self.range < TOP:
            self.code = ((self.code << 8) | self._next()) & MASK32
            self.range <<= 8
        return s

    def decode_bits(self, nbits):
        value = 0
        while nbits > 0:
            take = min(nbits, 16)
            nbits -= take
            r = self.range >> take
            v = self.code // r
            if v >> take:
                raise BitstreamError("corrupted payload in raw-bit section")
            self.code -= r * v
            self.range = r
            while self.range < TOP:
                self.code = ((self.code << 8) | self._next()) & MASK32
                self.range <<= 8
            value = (value << take) | v
        return value

    def finish(self):
        # The encoder flushed 4 meaningful bytes after the last symbol; the
        # decoder preloaded 4, so every byte is accounted for.
        if self._pos != len(self._data):
            raise BitstreamError(
                f"payload has {len(self._data) - self._pos} trailing bytes after the last symbol"
            )
