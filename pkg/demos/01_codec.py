"""Packing a query into 27 characters, and what PDU mode would cost.

Run:  python demos/01_codec.py
"""
from smsgate.codec import (
    CodecError,
    QueryCode,
    QueryMessage,
    ResponseMessage,
    Status,
    decode_query,
    decode_response,
    encode_query,
    encode_response,
    pdu_length_estimate,
)

# The five queries a handset can ask for
for code in QueryCode:
    print(code.value, code.label)

# A student asks for their credit total
msg = QueryMessage(QueryCode.STUDENT_CREDIT, "STU201500042", "pass123456")
wire = encode_query(msg)
print("\nwire form:", wire, f"({len(wire)} chars)")
print("  code     ", wire[0:3])
print("  user id  ", wire[3:15])
print("  reserved ", wire[15:17])
print("  password ", wire[17:27])
print("decoded:", decode_query(wire))

# Malformed input is classified, never crashes
for bad in ["9", "999STU20150004200pass123456", "002STU2015000-200pass123456"]:
    try:
        decode_query(bad)
    except CodecError as exc:
        print(f"{bad!r:32} -> {type(exc).__name__}")

# Responses are a status character plus up to 159 characters of text
reply = encode_response(ResponseMessage(Status.OK, "CREDITS:142"))
print("\nresponse:", reply, "->", decode_response(reply))

# Text mode sends 27 characters; septet-packed PDU user data would be 24 octets
print("\ntext chars:", len(wire), " PDU octets:", pdu_length_estimate(wire))
