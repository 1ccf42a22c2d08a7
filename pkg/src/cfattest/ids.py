"""Endpoint ID space shared by the instrumentation, the protocol and the verifier.

IDs are 64-bit unsigned integers on the wire. The two largest values are
reserved as request delimiters. Static IDs and XOR-masked IDs both live in the
lower half of the space, so neither can ever be mistaken for a delimiter.
"""

ID_BITS = 64
ID_MASK = (1 << ID_BITS) - 1

BEGIN = ID_MASK
END = ID_MASK - 1
TAGS = frozenset((BEGIN, END))

# Offsets are wrapped into 63 bits before masking; keeps masked values below the tags.
OFFSET_BITS = 63
OFFSET_MASK = (1 << OFFSET_BITS) - 1

# Static IDs are counter values shifted left. For any jump offset smaller than
# 2**ID_SHIFT in magnitude, a masked value can neither equal a static ID nor a
# masked value emitted from another site.
ID_SHIFT = 24
MAX_COUNTER = (1 << (OFFSET_BITS - ID_SHIFT)) - 1


def is_tag(value: int) -> bool:
    return value == BEGIN or value == END


def static_id(counter: int) -> int:
    if not 1 <= counter <= MAX_COUNTER:
        raise ValueError(f"ID counter out of range: {counter}")
    return counter << ID_SHIFT


def format_id(value: int) -> str:
    if value == BEGIN:
        return "BEGIN"
    if value == END:
        return "END"
    return str(value)


def parse_id(text: str) -> int:
    if text == "BEGIN":
        return BEGIN
    if text == "END":
        return END
    value = int(text, 0)
    if not 0 <= value <= ID_MASK:
        raise ValueError(f"endpoint ID out of range: {text}")
    return value
