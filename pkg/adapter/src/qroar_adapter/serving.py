"""Evaluator backend: score candidate plans over the line protocol.

The client speaks first with a hello, the server answers with its own hello,
then each eval request is handled fully before the next line is read. A
request applies the plan to the in-memory query/key weights, computes the
sliding-window perplexity per requested length, and restores the weights, so
one process can score the whole search grid. Anything that goes wrong comes
back as an error message on the wire; the loop never dies silently.
"""
from __future__ import annotations

import logging
import sys

import torch

from .model import TinyRopeLM, apply_plan_to_model
from .perplexity import perplexity
from .plans import PlanError, plan_from_wire
from .protocol import PROTOCOL_VERSION, ProtocolError, decode_message, encode_message, hello_message

logger = logging.getLogger("qroar_adapter.serve")


class AdapterServer:
    """One protocol session around a loaded model and eval corpus."""

    def __init__(self, model: TinyRopeLM, documents: list[list[int]]):
        self.model = model
        self.documents = documents
        self.ready = False
        self._pristine = [
            (module, module.weight.detach().clone())
            for _, q_proj, k_proj in model.qk_modules()
            for module in (q_proj, k_proj)
        ]

    def weights_pristine(self) -> bool:
        """True when the live weights equal the load-time snapshot bitwise."""
        return all(
            torch.equal(module.weight, saved) for module, saved in self._pristine
        )

    def _restore(self) -> None:
        with torch.no_grad():
            for module, saved in self._pristine:
                module.weight.copy_(saved)

    def _error(self, message: str) -> str:
        logger.warning("request failed: %s", message)
        return encode_message({"type": "error", "message": message})

    def handle_line(self, line: str) -> str:
        """Process one request line and return the reply line (no newline)."""
        try:
            msg = decode_message(line)
        except ProtocolError as exc:
            return self._error(str(exc))
        if msg["type"] == "hello":
            if msg["version"] != PROTOCOL_VERSION:
                return self._error(
                    f"unsupported protocol version {msg['version']}, "
                    f"this backend speaks {PROTOCOL_VERSION}"
                )
            self.ready = True
            return encode_message(hello_message())
        if not self.ready:
            return self._error("expected a hello before any other message")
        if msg["type"] != "eval":
            return self._error(
                f"backend accepts hello and eval requests, not {msg['type']!r}"
            )
        return self._eval(msg)

    def _eval(self, msg: dict) -> str:
        cfg = self.model.config
        try:
            plan = plan_from_wire(msg["plan"], cfg.head_dim)
            if plan.pairing != cfg.pairing:
                raise PlanError(
                    f"plan pairing {plan.pairing!r} does not match the model's "
                    f"{cfg.pairing!r}"
                )
        except PlanError as exc:
            return self._error(str(exc))
        ppl: dict[str, float] = {}
        try:
            apply_plan_to_model(self.model, plan)
            for length in msg["lengths"]:
                ppl[str(length)] = perplexity(
                    self.model, self.documents, length, msg["window"]
                )
        except Exception as exc:
            return self._error(f"evaluation failed: {exc}")
        finally:
            self._restore()
        return encode_message({"type": "ok", "ppl": ppl})


def adapter_serve(
    model: TinyRopeLM,
    documents: list[list[int]],
    stdin=None,
    stdout=None,
) -> int:
    """Run the protocol loop until end of input. Returns the exit code."""
    stdin = stdin if stdin is not None else sys.stdin
    stdout = stdout if stdout is not None else sys.stdout
    server = AdapterServer(model, documents)
    logger.info(
        "serving %d-layer model (head_dim %d, pairing %s); stride = window, "
        "perplexity pooled token-level across %d documents",
        model.config.num_layers,
        model.config.head_dim,
        model.config.pairing,
        len(documents),
    )
    for line in stdin:
        if not line.strip():
            continue
        stdout.write(server.handle_line(line) + "\n")
        stdout.flush()
    logger.info("client closed the stream, shutting down")
    return 0
