"""Store-and-forward query gateway over a simulated SMS link."""

from .codec import (
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
from .queue_store import Envelope, QueueRecord, QueueStore, open_store

__version__ = "0.1.0"
