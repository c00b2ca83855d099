"""Shared builders for randomized test inputs."""

import random

from forgerl.codec import DELIMITERS, Message, Segment, ToolCall, ToolSchema

# Words chosen to poke at the template's delimiter handling: partial tag
# prefixes, lone angle brackets, unicode, quotes, backslashes.
_WORDS = (
    "alpha", "beta", "gamma", "答案", "温度", "🌧", "x=1", "a<b", "b>c",
    '"quoted"', "back\\slash", "<to", "<|sys", "</arg", "{json:", "}",
    "<think", "arg_key>", "tool", "call", "100%", "it's",
)

_CODE_LINES = (
    'print("hello")',
    "if x < 2: return {'k': \"v\"}",
    'path = "C:\\\\Users\\\\test"',
    "s = 'it\\'s'",
    'data = {"a": [1, 2], "b": "c"}',
    "regex = re.compile(r'\\d+\\s*\\\"')",
)


def _clean(s: str) -> str:
    for d in DELIMITERS:
        s = s.replace(d, d[1:])
    return s


def words(rng: random.Random, n_min=0, n_max=6, sep=" ") -> str:
    n = rng.randint(n_min, n_max)
    return _clean(sep.join(rng.choice(_WORDS) for _ in range(n)))


def make_call(rng: random.Random) -> ToolCall:
    name = rng.choice(("run", "search", "fetch_data", "compute.sum", "f"))
    n_args = rng.randint(0, 4)
    keys = rng.sample(["query", "code", "path", "n", "flags", "选项"], n_args)
    args = []
    for k in keys:
        if rng.random() < 0.4:
            v = "\n".join(rng.choice(_CODE_LINES) for _ in range(rng.randint(1, 4)))
        else:
            v = words(rng, 0, 8)
        args.append((k, v))
    return ToolCall(name, tuple(args))


def make_conversation(rng: random.Random):
    """A random structurally-valid conversation plus tool schemas."""
    tools = []
    if rng.random() < 0.5:
        for i in range(rng.randint(1, 3)):
            params = None
            if rng.random() < 0.7:
                params = {
                    "type": "object",
                    "properties": {"q": {"type": "string", "description": words(rng, 1, 4)}},
                }
            tools.append(ToolSchema(f"tool_{i}", words(rng, 0, 6), params))

    messages = []
    for _ in range(rng.randint(0, 2)):
        messages.append(Message("system", (Segment.text_(words(rng, 1, 8)),)))

    last_had_call = False
    for _ in range(rng.randint(1, 6)):
        roll = rng.random()
        if last_had_call and roll < 0.6:
            segs = tuple(
                Segment.tool_response(words(rng, 0, 10, sep=rng.choice(" \n")))
                for _ in range(rng.randint(1, 3))
            )
            messages.append(Message("observation", segs))
            last_had_call = False
            continue
        if roll < 0.5:
            messages.append(Message("user", (Segment.text_(words(rng, 1, 10)),)))
            last_had_call = False
            continue
        segs = []
        if rng.random() < 0.5:
            segs.append(Segment.think(words(rng, 0, 10)))
        n_text = rng.randint(0, 2)
        for _ in range(n_text):
            segs.append(Segment.text_(words(rng, 0, 10)))
        n_calls = rng.randint(0, 2)
        for _ in range(n_calls):
            segs.append(Segment.tool_call(make_call(rng)))
        messages.append(Message("assistant", tuple(segs)))
        last_had_call = n_calls > 0
    if rng.random() < 0.2:
        messages.append(Message("user", ()))
    return messages, tools


def code_argument_corpus():
    """50 code snippets of the kind that ends up in tool-call arguments."""
    snippets = []
    for i in range(50):
        snippets.append(
            f'def job_{i}(path):\n'
            f'    print("step {i}", end="\\n")\n'
            f'    with open(path + "\\\\out_{i}.txt") as fh:\n'
            f'        data = {{"id": {i}, "tag": "a\\"b"}}\n'
            f'    return fh.read(), data\n'
        )
    return snippets
