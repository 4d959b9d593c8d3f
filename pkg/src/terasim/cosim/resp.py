"""RESP2 wire framing: request parsing and reply serialization.

Requests arrive as arrays of bulk strings (or legacy inline command lines);
replies go out as simple strings, errors, integers, bulk strings, or arrays.
The parser is incremental and resynchronizes after malformed input so one bad
frame never takes the connection down.
"""

from __future__ import annotations

MAX_BULK = 8 * 1024 * 1024
MAX_ELEMENTS = 1024
MAX_LINE = 64 * 1024
CRLF = b"\r\n"


class ProtocolError(Exception):
    pass


def encode_simple(text: str) -> bytes:
    return b"+" + text.encode() + CRLF


def encode_error(text: str) -> bytes:
    return b"-" + text.replace("\r", " ").replace("\n", " ").encode() + CRLF


def encode_integer(value: int) -> bytes:
    return b":" + str(value).encode() + CRLF


def encode_bulk(payload: bytes | str | None) -> bytes:
    if payload is None:
        return b"$-1" + CRLF
    if isinstance(payload, str):
        payload = payload.encode()
    return b"$" + str(len(payload)).encode() + CRLF + payload + CRLF


def encode_array(items: list | None) -> bytes:
    if items is None:
        return b"*-1" + CRLF
    out = [b"*" + str(len(items)).encode() + CRLF]
    for item in items:
        if isinstance(item, int):
            out.append(encode_integer(item))
        elif isinstance(item, list):
            out.append(encode_array(item))
        elif item is None:
            out.append(encode_bulk(None))
        else:
            out.append(encode_bulk(item))
    return b"".join(out)


class RequestParser:
    """Incremental parser for client request frames.

    next_request() returns a list of argument byte strings, None when more
    input is needed, and raises ProtocolError on malformed frames after
    discarding input up to the next line boundary.
    """

    def __init__(self):
        self._buf = bytearray()

    def feed(self, data: bytes) -> None:
        self._buf.extend(data)

    def _discard_line(self) -> None:
        i = self._buf.find(CRLF)
        if i < 0:
            self._buf.clear()
        else:
            del self._buf[: i + 2]

    def _read_line(self, start: int) -> tuple[bytes, int] | None:
        i = self._buf.find(CRLF, start)
        if i < 0:
            if len(self._buf) - start > MAX_LINE:
                self._discard_line()
                raise ProtocolError("line too long")
            return None
        return bytes(self._buf[start:i]), i + 2

    def next_request(self) -> list[bytes] | None:
        if not self._buf:
            return None
        if self._buf[0:1] != b"*":
            # inline command: a bare CRLF-terminated line
            got = self._read_line(0)
            if got is None:
                return None
            line, end = got
            del self._buf[:end]
            parts = line.split()
            if not parts:
                return self.next_request()
            return parts
        got = self._read_line(1)
        if got is None:
            return None
        header, pos = got
        try:
            count = int(header)
        except ValueError:
            self._discard_line()
            raise ProtocolError(f"invalid multibulk length {header[:32]!r}")
        if count < 0 or count > MAX_ELEMENTS:
            self._discard_line()
            raise ProtocolError("invalid multibulk length")
        args: list[bytes] = []
        for _ in range(count):
            if pos >= len(self._buf) or self._buf[pos:pos + 1] != b"$":
                if pos >= len(self._buf):
                    return None
                self._discard_line()
                raise ProtocolError("expected bulk string")
            got = self._read_line(pos + 1)
            if got is None:
                return None
            size_raw, data_start = got
            try:
                size = int(size_raw)
            except ValueError:
                self._discard_line()
                raise ProtocolError(f"invalid bulk length {size_raw[:32]!r}")
            if size < 0 or size > MAX_BULK:
                self._discard_line()
                raise ProtocolError("invalid bulk length")
            data_end = data_start + size
            if len(self._buf) < data_end + 2:
                return None
            if self._buf[data_end:data_end + 2] != CRLF:
                self._discard_line()
                raise ProtocolError("bulk string missing terminator")
            args.append(bytes(self._buf[data_start:data_end]))
            pos = data_end + 2
        del self._buf[:pos]
        return args


class ReplyParser:
    """Incremental parser for server replies (used by tests and the replayer)."""

    def __init__(self):
        self._buf = bytearray()

    def feed(self, data: bytes) -> None:
        self._buf.extend(data)

    def next_reply(self):
        value, consumed = self._parse(0)
        if consumed:
            del self._buf[:consumed]
        return value

    def _parse(self, pos: int):
        if pos >= len(self._buf):
            return None, 0
        kind = self._buf[pos:pos + 1]
        i = self._buf.find(CRLF, pos)
        if i < 0:
            return None, 0
        line = bytes(self._buf[pos + 1:i])
        after = i + 2
        if kind in (b"+", b"-"):
            return (("error", line.decode()) if kind == b"-" else line.decode()), after
        if kind == b":":
            return int(line), after
        if kind == b"$":
            size = int(line)
            if size < 0:
                return ("nil",), after
            end = after + size
            if len(self._buf) < end + 2:
                return None, 0
            return bytes(self._buf[after:end]), end + 2
        if kind == b"*":
            count = int(line)
            if count < 0:
                return ("nil",), after
            items = []
            cursor = after
            for _ in range(count):
                value, consumed = self._parse(cursor)  # consumed is absolute
                if consumed == 0:
                    return None, 0
                items.append(value)
                cursor = consumed
            return items, cursor
        raise ProtocolError(f"unknown reply type {kind!r}")
