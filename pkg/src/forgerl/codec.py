"""Chat template codec for tool-calling conversations.

Messages are framed by role sentinels (``<|system|>``, ``<|user|>``,
``<|assistant|>``, ``<|observation|>``) and carry four segment kinds:
plain text, ``<think>`` blocks, tool calls, and tool responses.  Tool-call
arguments live inside ``<arg_key>``/``<arg_value>`` tag pairs with the
value bytes stored verbatim — no escaping layer — which is the whole point:
code-valued arguments render in their native form.

The flip side of "no escaping" is that payloads must not contain the
template's own delimiter strings.  ``render`` rejects such payloads with
:class:`InvariantViolation`; ``parse`` rejects any input outside the
renderable language with :class:`FormatError` (carrying a byte offset), so
the two functions are exact inverses on the renderable set.

See ``docs/template-grammar.txt`` for the full grammar, including the exact
newline placement rules.
"""

from __future__ import annotations

import json
import re
from dataclasses import dataclass, field
from typing import Iterable, Mapping, NamedTuple, Sequence

__all__ = [
    "CodecError",
    "InvariantViolation",
    "FormatError",
    "ToolCall",
    "ToolSchema",
    "Segment",
    "Message",
    "EscapeOverhead",
    "render",
    "parse",
    "escape_overhead",
    "message_to_dict",
    "message_from_dict",
    "ROLES",
    "DELIMITERS",
]

ROLES = ("system", "user", "assistant", "observation")

_SENTINEL_OF = {
    "system": "<|system|>",
    "user": "<|user|>",
    "assistant": "<|assistant|>",
    "observation": "<|observation|>",
}
_ROLE_OF = {v: k for k, v in _SENTINEL_OF.items()}

# Every string with structural meaning inside message bodies.  Payloads
# (text, think text, tool names, arg keys/values, tool responses) must not
# contain any of these.
DELIMITERS = (
    "<|system|>",
    "<|user|>",
    "<|assistant|>",
    "<|observation|>",
    "<think>",
    "</think>",
    "<tool_call>",
    "</tool_call>",
    "<arg_key>",
    "</arg_key>",
    "<arg_value>",
    "</arg_value>",
    "<tool_response>",
    "</tool_response>",
)

_DELIM_RE = re.compile("|".join(re.escape(d) for d in DELIMITERS))

# Fixed framing of the tools block carried by the leading system message.
TOOLS_PREFIX = (
    "# Tools\n"
    "\n"
    "You may call one or more functions to assist with the user query.\n"
    "\n"
    "You are provided with function signatures within <tools></tools> XML tags:\n"
    "<tools>\n"
)
TOOLS_SUFFIX = (
    "\n</tools>\n"
    "\n"
    "For each function call, output the function name and arguments within the following XML format:\n"
    "<tool_call>{function-name}\n"
    "<arg_key>{arg-key-1}</arg_key>\n"
    "<arg_value>{arg-value-1}</arg_value>\n"
    "<arg_key>{arg-key-2}</arg_key>\n"
    "<arg_value>{arg-value-2}</arg_value>\n"
    "...\n"
    "</tool_call>"
)


class CodecError(Exception):
    """Base class for template codec errors."""


class InvariantViolation(CodecError):
    """Raised at render/construction time for unrepresentable content."""


class FormatError(CodecError):
    """Parse failure.  ``offset`` is the byte offset into the UTF-8 input."""

    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (byte offset {offset})")
        self.offset = offset


def _byte_offset(text: str, idx: int) -> int:
    return len(text[:idx].encode("utf-8"))


@dataclass(frozen=True)
class ToolCall:
    """A named call with ordered (key, value) argument pairs.

    Values are verbatim strings: newlines, quotes, backslashes, braces all
    pass through untouched.
    """

    name: str
    args: tuple[tuple[str, str], ...] = ()

    def __post_init__(self):
        object.__setattr__(self, "args", tuple((str(k), str(v)) for k, v in self.args))
        if not self.name:
            raise InvariantViolation("tool name must be non-empty")
        if any(ch.isspace() for ch in self.name):
            raise InvariantViolation(f"tool name must not contain whitespace: {self.name!r}")
        keys = [k for k, _ in self.args]
        if len(set(keys)) != len(keys):
            raise InvariantViolation(f"duplicate arg keys in call {self.name!r}: {keys}")

    def args_dict(self) -> dict[str, str]:
        return dict(self.args)


@dataclass(frozen=True)
class ToolSchema:
    """Declared tool: name, free-text description, opaque parameter spec.

    Serialized as a single JSON object line inside the tools block; the
    codec never validates calls against the parameter spec.
    """

    name: str
    description: str = ""
    parameters: Mapping | None = None

    def __post_init__(self):
        if not self.name or not isinstance(self.name, str):
            raise InvariantViolation("tool schema requires a non-empty string name")

    def to_json_line(self) -> str:
        obj: dict = {"name": self.name}
        if self.description:
            obj["description"] = self.description
        if self.parameters is not None:
            obj["parameters"] = self.parameters
        return json.dumps(obj, ensure_ascii=False)


_SEGMENT_KINDS = ("text", "think", "tool_call", "tool_response")


@dataclass(frozen=True)
class Segment:
    """One span of message content.  Use the factory classmethods."""

    kind: str
    text: str | None = None
    call: ToolCall | None = None

    @classmethod
    def text_(cls, text: str) -> "Segment":
        return cls("text", text=str(text))

    @classmethod
    def think(cls, text: str) -> "Segment":
        return cls("think", text=str(text))

    @classmethod
    def tool_call(cls, call: ToolCall) -> "Segment":
        return cls("tool_call", call=call)

    @classmethod
    def tool_response(cls, text: str) -> "Segment":
        return cls("tool_response", text=str(text))

    def __post_init__(self):
        if self.kind not in _SEGMENT_KINDS:
            raise InvariantViolation(f"unknown segment kind {self.kind!r}")
        if self.kind == "tool_call":
            if self.call is None or self.text is not None:
                raise InvariantViolation("tool_call segments carry a ToolCall payload")
        elif self.text is None or self.call is not None:
            raise InvariantViolation(f"{self.kind} segments carry a text payload")


@dataclass(frozen=True)
class Message:
    role: str
    segments: tuple[Segment, ...] = ()

    def __post_init__(self):
        object.__setattr__(self, "segments", tuple(self.segments))
        if self.role not in ROLES:
            raise InvariantViolation(f"unknown role {self.role!r}")

    def tool_calls(self) -> list[ToolCall]:
        return [s.call for s in self.segments if s.kind == "tool_call"]


class EscapeOverhead(NamedTuple):
    template_escapes: int
    json_escapes: int


# ── render ───────────────────────────────────────────────────────────────


def _reject_delims(payload: str, what: str, *, newline_ok: bool) -> None:
    m = _DELIM_RE.search(payload)
    if m is not None:
        raise InvariantViolation(
            f"{what} contains template delimiter {m.group()!r}: {payload!r}"
        )
    if not newline_ok and "\n" in payload:
        raise InvariantViolation(
            f"{what} must be a single line (use consecutive text segments "
            f"for multi-line prose): {payload!r}"
        )


def _render_segment(seg: Segment) -> str:
    if seg.kind == "text":
        _reject_delims(seg.text, "text segment", newline_ok=False)
        return seg.text
    if seg.kind == "think":
        _reject_delims(seg.text, "think text", newline_ok=False)
        return f"<think>{seg.text}</think>"
    if seg.kind == "tool_response":
        _reject_delims(seg.text, "tool response", newline_ok=True)
        return f"<tool_response>\n{seg.text}\n</tool_response>"
    call = seg.call
    _reject_delims(call.name, "tool name", newline_ok=False)
    parts = [f"<tool_call>{call.name}\n"]
    for k, v in call.args:
        _reject_delims(k, f"arg key of {call.name!r}", newline_ok=True)
        _reject_delims(v, f"arg value {k!r} of {call.name!r}", newline_ok=True)
        parts.append(f"<arg_key>{k}</arg_key>\n<arg_value>{v}</arg_value>\n")
    parts.append("</tool_call>")
    return "".join(parts)


def _validate_structure(messages: Sequence[Message]) -> None:
    if not messages:
        raise InvariantViolation("conversation must contain at least one message")
    seen_non_system = False
    prev: Message | None = None
    for m in messages:
        if m.role == "system":
            if seen_non_system:
                raise InvariantViolation("system messages are only allowed at the start")
        else:
            seen_non_system = True
        if m.role == "observation":
            if prev is None or prev.role != "assistant" or not prev.tool_calls():
                raise InvariantViolation(
                    "observation must follow an assistant message with a tool call"
                )
        for i, seg in enumerate(m.segments):
            if seg.kind == "think":
                if m.role != "assistant":
                    raise InvariantViolation("think segments only appear in assistant messages")
                if i != 0:
                    raise InvariantViolation("think must be the first segment of its message")
            elif seg.kind == "tool_call" and m.role != "assistant":
                raise InvariantViolation("tool_call segments only appear in assistant messages")
            elif seg.kind == "tool_response" and m.role != "observation":
                raise InvariantViolation(
                    "tool_response segments only appear in observation messages"
                )
        prev = m


def render(conversation: Sequence[Message], tools: Sequence[ToolSchema] = ()) -> str:
    """Serialize a conversation (plus optional tool schemas) to template text.

    When ``tools`` is non-empty a leading system message carrying the
    ``<tools>`` block is synthesized; it is not part of ``conversation``.
    """
    messages = list(conversation)
    _validate_structure(messages)
    parts: list[str] = []
    if tools:
        lines = []
        for schema in tools:
            line = schema.to_json_line()
            _reject_delims(line, f"schema line for {schema.name!r}", newline_ok=True)
            if "<tools>" in line or "</tools>" in line:
                raise InvariantViolation(
                    f"schema line for {schema.name!r} contains a tools-block marker"
                )
            if "\n" in line:  # unreachable for json.dumps output; guards subclasses
                raise InvariantViolation(f"schema line for {schema.name!r} spans lines")
            lines.append(line)
        parts.append("<|system|>\n" + TOOLS_PREFIX + "\n".join(lines) + TOOLS_SUFFIX)
    for m in messages:
        parts.append(_SENTINEL_OF[m.role])
        for seg in m.segments:
            parts.append("\n" + _render_segment(seg))
    return "".join(parts)


# ── parse ────────────────────────────────────────────────────────────────


def _sentinel_at(text: str, pos: int) -> str | None:
    if not text.startswith("<|", pos):
        return None
    for sent in _ROLE_OF:
        if text.startswith(sent, pos):
            return sent
    return None


def _next_sentinel(text: str, pos: int) -> int:
    best = len(text)
    for sent in _ROLE_OF:
        i = text.find(sent, pos)
        if 0 <= i < best:
            best = i
    return best


def _check_payload(text: str, payload: str, what: str, start: int, *, newline_ok: bool) -> None:
    m = _DELIM_RE.search(payload)
    if m is not None:
        raise FormatError(
            f"{what} contains template delimiter {m.group()!r}",
            _byte_offset(text, start + m.start()),
        )
    if not newline_ok and "\n" in payload:
        raise FormatError(
            f"{what} must not span lines", _byte_offset(text, start + payload.index("\n"))
        )


def _parse_tool_call(text: str, start: int) -> tuple[ToolCall, int]:
    n = len(text)
    pos = start + len("<tool_call>")
    nl = text.find("\n", pos)
    if nl < 0:
        raise FormatError("unclosed <tool_call>", _byte_offset(text, start))
    name = text[pos:nl]
    _check_payload(text, name, "tool name", pos, newline_ok=False)
    if not name or any(ch.isspace() for ch in name):
        raise FormatError(
            "tool name must be non-empty without whitespace", _byte_offset(text, pos)
        )
    pos = nl + 1
    args: list[tuple[str, str]] = []
    seen: set[str] = set()
    while True:
        if pos >= n:
            raise FormatError("unclosed <tool_call>", _byte_offset(text, start))
        if text.startswith("</tool_call>", pos):
            pos += len("</tool_call>")
            break
        if text.startswith("<arg_value>", pos):
            raise FormatError("arg_value without preceding arg_key", _byte_offset(text, pos))
        if not text.startswith("<arg_key>", pos):
            raise FormatError(
                "expected <arg_key> or </tool_call> in tool call body",
                _byte_offset(text, pos),
            )
        kstart = pos + len("<arg_key>")
        kend = text.find("</arg_key>", kstart)
        if kend < 0:
            raise FormatError("unclosed <arg_key>", _byte_offset(text, pos))
        key = text[kstart:kend]
        _check_payload(text, key, "arg key", kstart, newline_ok=True)
        pos = kend + len("</arg_key>")
        if not text.startswith("\n", pos):
            raise FormatError("expected newline after </arg_key>", _byte_offset(text, pos))
        pos += 1
        if not text.startswith("<arg_value>", pos):
            raise FormatError("arg_key without following arg_value", _byte_offset(text, pos))
        vstart = pos + len("<arg_value>")
        vend = text.find("</arg_value>", vstart)
        if vend < 0:
            raise FormatError("unclosed <arg_value>", _byte_offset(text, pos))
        value = text[vstart:vend]
        _check_payload(text, value, "arg value", vstart, newline_ok=True)
        pos = vend + len("</arg_value>")
        if not text.startswith("\n", pos):
            raise FormatError("expected newline after </arg_value>", _byte_offset(text, pos))
        pos += 1
        if key in seen:
            raise FormatError(f"duplicate arg key {key!r}", _byte_offset(text, kstart))
        seen.add(key)
        args.append((key, value))
    return ToolCall(name, tuple(args)), pos


def _parse_tool_response(text: str, start: int) -> tuple[Segment, int]:
    pos = start + len("<tool_response>")
    if not text.startswith("\n", pos):
        raise FormatError("expected newline after <tool_response>", _byte_offset(text, pos))
    end = text.find("\n</tool_response>", pos + 1)
    if end < 0:
        raise FormatError("unclosed <tool_response>", _byte_offset(text, start))
    payload = text[pos + 1 : end]
    _check_payload(text, payload, "tool response", pos + 1, newline_ok=True)
    return Segment.tool_response(payload), end + 1 + len("</tool_response>")


def _parse_segments(text: str, pos: int, role: str) -> tuple[list[Segment], int]:
    n = len(text)
    segs: list[Segment] = []
    while pos < n and _sentinel_at(text, pos) is None:
        if text[pos] != "\n":
            raise FormatError(
                "expected newline, role sentinel, or end of input", _byte_offset(text, pos)
            )
        pos += 1
        if text.startswith("<think>", pos):
            if role != "assistant":
                raise FormatError("think segment outside assistant message", _byte_offset(text, pos))
            if segs:
                raise FormatError(
                    "think must be the first segment of its message", _byte_offset(text, pos)
                )
            tstart = pos + len("<think>")
            tend = text.find("</think>", tstart)
            if tend < 0:
                raise FormatError("unclosed <think>", _byte_offset(text, pos))
            payload = text[tstart:tend]
            _check_payload(text, payload, "think text", tstart, newline_ok=False)
            segs.append(Segment.think(payload))
            pos = tend + len("</think>")
        elif text.startswith("<tool_call>", pos):
            if role != "assistant":
                raise FormatError("tool_call outside assistant message", _byte_offset(text, pos))
            call, pos = _parse_tool_call(text, pos)
            segs.append(Segment.tool_call(call))
        elif text.startswith("<tool_response>", pos):
            if role != "observation":
                raise FormatError(
                    "tool_response outside observation message", _byte_offset(text, pos)
                )
            seg, pos = _parse_tool_response(text, pos)
            segs.append(seg)
        elif text.startswith("<arg_value>", pos):
            raise FormatError("arg_value without preceding arg_key", _byte_offset(text, pos))
        elif text.startswith("<arg_key>", pos):
            raise FormatError("arg_key outside a tool call", _byte_offset(text, pos))
        else:
            nl = text.find("\n", pos)
            end = min(nl if nl >= 0 else n, _next_sentinel(text, pos))
            payload = text[pos:end]
            _check_payload(text, payload, "text segment", pos, newline_ok=False)
            segs.append(Segment.text_(payload))
            pos = end
    return segs, pos


def _schema_from_line(text: str, line: str, off: int) -> ToolSchema:
    try:
        obj = json.loads(line)
    except ValueError as exc:
        raise FormatError(f"invalid JSON schema line: {exc}", _byte_offset(text, off)) from None
    if not isinstance(obj, dict):
        raise FormatError("schema line must be a JSON object", _byte_offset(text, off))
    unknown = sorted(set(obj) - {"name", "description", "parameters"})
    if unknown:
        raise FormatError(f"unexpected schema key {unknown[0]!r}", _byte_offset(text, off))
    name = obj.get("name")
    if not isinstance(name, str) or not name:
        raise FormatError("schema requires a non-empty string name", _byte_offset(text, off))
    description = obj.get("description", "")
    if not isinstance(description, str):
        raise FormatError("schema description must be a string", _byte_offset(text, off))
    parameters = obj.get("parameters")
    if parameters is not None and not isinstance(parameters, dict):
        raise FormatError("schema parameters must be an object", _byte_offset(text, off))
    return ToolSchema(name, description, parameters)


def _parse_tools_block(text: str, pos: int) -> tuple[list[ToolSchema], int]:
    """``pos`` sits on the newline right after the opening ``<|system|>``."""
    body_start = pos + 1
    lines_start = body_start + len(TOOLS_PREFIX)
    close = text.find("\n</tools>", lines_start)
    if close < 0:
        raise FormatError("unclosed <tools> block", _byte_offset(text, body_start))
    schemas: list[ToolSchema] = []
    off = lines_start
    for line in text[lines_start:close].split("\n"):
        if not line:
            raise FormatError("empty schema line in tools block", _byte_offset(text, off))
        schemas.append(_schema_from_line(text, line, off))
        off += len(line) + 1
    if not text.startswith(TOOLS_SUFFIX, close):
        raise FormatError("malformed tools block epilogue", _byte_offset(text, close))
    return schemas, close + len(TOOLS_SUFFIX)


def parse(text: str) -> tuple[list[Message], list[ToolSchema]]:
    """Parse template text back into (messages, tools).

    Total: any input either parses or raises :class:`FormatError` with the
    byte offset of the first problem.  On output produced by :func:`render`
    this is an exact inverse.
    """
    n = len(text)
    if n == 0:
        raise FormatError("empty input: expected a role sentinel", 0)
    pos = 0
    messages: list[Message] = []
    tools: list[ToolSchema] = []
    saw_tools = False
    while pos < n:
        sent = _sentinel_at(text, pos)
        if sent is None:
            raise FormatError("expected a role sentinel", _byte_offset(text, pos))
        role = _ROLE_OF[sent]
        msg_start = pos
        pos += len(sent)
        if (
            role == "system"
            and not messages
            and not saw_tools
            and text.startswith("\n" + TOOLS_PREFIX, pos)
        ):
            tools, pos = _parse_tools_block(text, pos)
            saw_tools = True
            continue
        if role == "system" and any(m.role != "system" for m in messages):
            raise FormatError(
                "system message after non-system message", _byte_offset(text, msg_start)
            )
        segs, pos = _parse_segments(text, pos, role)
        if role == "observation":
            prev = messages[-1] if messages else None
            if prev is None or prev.role != "assistant" or not prev.tool_calls():
                raise FormatError(
                    "observation must follow an assistant message with a tool call",
                    _byte_offset(text, msg_start),
                )
        messages.append(Message(role, tuple(segs)))
    if not messages:
        raise FormatError("tools block without conversation messages", _byte_offset(text, n))
    return messages, tools


# ── escape accounting ────────────────────────────────────────────────────


def escape_overhead(call: ToolCall) -> EscapeOverhead:
    """Characters in the call's values that would need escaping.

    ``template_escapes``: characters covered by template delimiter
    occurrences (these values could not be rendered verbatim).
    ``json_escapes``: characters a JSON string encoding of the same values
    must escape per RFC 8259 (quote, backslash, control characters).
    """
    template = 0
    jsonish = 0
    for _, value in call.args:
        for m in _DELIM_RE.finditer(value):
            template += len(m.group())
        jsonish += sum(1 for ch in value if ch == '"' or ch == "\\" or ord(ch) < 0x20)
    return EscapeOverhead(template, jsonish)


# ── plain-dict serialization (trajectory files, CLI) ─────────────────────


def message_to_dict(message: Message) -> dict:
    segs: list[dict] = []
    for seg in message.segments:
        if seg.kind == "tool_call":
            segs.append(
                {"kind": "tool_call", "name": seg.call.name, "args": [list(kv) for kv in seg.call.args]}
            )
        else:
            segs.append({"kind": seg.kind, "text": seg.text})
    return {"role": message.role, "segments": segs}


def message_from_dict(obj: Mapping) -> Message:
    segs = []
    for d in obj["segments"]:
        kind = d["kind"]
        if kind == "tool_call":
            segs.append(Segment.tool_call(ToolCall(d["name"], tuple((k, v) for k, v in d["args"]))))
        elif kind == "text":
            segs.append(Segment.text_(d["text"]))
        elif kind == "think":
            segs.append(Segment.think(d["text"]))
        elif kind == "tool_response":
            segs.append(Segment.tool_response(d["text"]))
        else:
            raise ValueError(f"unknown segment kind {kind!r}")
    return Message(obj["role"], tuple(segs))
