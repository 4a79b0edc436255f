#!/usr/bin/env python3
"""The routing wire schema, from the device's point of view.

Every routed position ships a self-contained request: the plain-text
context, the device's rejected candidate, the position index, the threshold,
the last-layer hidden state, and the full routing history. Serialization is
canonical, so equal requests give equal bytes and replays can be compared
byte-for-byte.
"""

from pathlib import Path

from tokenroute.types import Route
from tokenroute.wire import (
    PreviousDecision,
    RoutingRequest,
    parse_request,
    serialize_request,
)

request = RoutingRequest(
    context="The mitochondria is the powerhouse of the",
    current_token="cell",
    token_index=15,
    routing_threshold=0.7,
    session_id="session123",
    request_id="req456",
    hidden_states=(0.0125, -0.9034, 0.4277, 1.5081),
    history=(
        PreviousDecision(token="mitochondria", route=Route.SLM),
        PreviousDecision(token="powerhouse", route=Route.LLM),
    ),
)

wire_bytes = serialize_request(request)
print("canonical request body:")
print("  " + wire_bytes.decode("utf-8"))

back = parse_request(wire_bytes)
print(f"\nround-trip equality: {back == request}")
print(f"canonical stability:  {serialize_request(back) == wire_bytes}")

golden = Path(__file__).resolve().parent.parent / "tests" / "golden" / "api_format_request.json"
if golden.exists():
    parsed = parse_request(golden.read_bytes())
    print(f"\ngolden document parses: token_index={parsed.token_index}, "
          f"threshold={parsed.routing_threshold}, session={parsed.session_id}")

print("\nvalidation is machine-readable:")
from tokenroute.wire import FieldOutOfRange, MissingField

try:
    parse_request(b'{"context": "x"}')
except MissingField as exc:
    print(f"  MissingField: {exc.name}")
try:
    doc = wire_bytes.replace(b'"routing_threshold":0.7', b'"routing_threshold":1.3')
    parse_request(doc)
except FieldOutOfRange as exc:
    print(f"  FieldOutOfRange: {exc.name}")
