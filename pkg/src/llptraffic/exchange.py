"""Simulated peer-to-peer histogram transport.

An in-process mailbox keyed by (receiver, window, channel), lock-stepped
with the training loop: the driver publishes every node's histograms for
a window before any node collects. Every message is metered in a traffic
ledger so communication cost can be compared against a centralized
baseline.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .privacy import NoisyHistogram, average_histograms
from .topology import SensorGraph

BIN_BYTES = 8
HEADER_BYTES = 24


def message_bytes(bin_count: int) -> int:
    return bin_count * BIN_BYTES + HEADER_BYTES


class PrivacyViolationError(RuntimeError):
    """An un-noised histogram was about to cross the network while epsilon is configured."""


@dataclass(frozen=True)
class HistogramMessage:
    origin: object
    window_index: int
    channel: str
    payload: NoisyHistogram
    byte_size: int


@dataclass
class TrafficLedger:
    """Cumulative per-(sender, receiver) message and byte counts."""

    counts: dict = field(default_factory=dict)

    def record(self, sender, receiver, nbytes: int) -> None:
        msgs, total = self.counts.get((sender, receiver), (0, 0))
        self.counts[(sender, receiver)] = (msgs + 1, total + nbytes)

    @property
    def total_messages(self) -> int:
        return sum(m for m, _ in self.counts.values())

    @property
    def total_bytes(self) -> int:
        return sum(b for _, b in self.counts.values())

    def rows(self):
        """(sender, receiver, messages, bytes) rows, sorted for stable dumps."""
        return sorted(
            (s, r, m, b) for (s, r), (m, b) in self.counts.items()
        )


class MessageBus:
    """Mailbox transport between direct graph neighbors.

    Duplicate publishes to the same (receiver, window, channel, origin)
    slot overwrite (latest wins). When ``require_epsilon`` is set, any
    un-noised payload is rejected hard.
    """

    def __init__(self, graph: SensorGraph, require_epsilon: bool = False):
        self.graph = graph
        self.require_epsilon = require_epsilon
        self.ledger = TrafficLedger()
        self._boxes: dict = {}

    def publish_window(self, node, window_index: int, histograms: dict) -> None:
        """Send one histogram per channel to every direct neighbor of ``node``."""
        for channel, hist in histograms.items():
            if self.require_epsilon and not hist.is_noised:
                raise PrivacyViolationError(
                    f"node {node!r} attempted to publish an un-noised histogram "
                    f"for window {window_index}, channel {channel!r}"
                )
            size = message_bytes(hist.bin_count)
            for neighbor in self.graph.neighbors(node):
                message = HistogramMessage(
                    origin=node,
                    window_index=window_index,
                    channel=channel,
                    payload=hist,
                    byte_size=size,
                )
                box = self._boxes.setdefault((neighbor, window_index, channel), {})
                box[node] = message
                self.ledger.record(node, neighbor, size)

    def collect_neighbor_histograms(self, node, window_index: int, channel: str):
        """All histograms published to ``node`` for this window/channel."""
        self.graph.index_of(node)
        box = self._boxes.get((node, window_index, channel), {})
        return [msg.payload for _, msg in sorted(box.items(), key=lambda kv: str(kv[0]))]

    def resolve_input_histogram(
        self, node, window_index: int, channel: str, own_history, window_size: int
    ) -> np.ndarray:
        """Averaged neighbor proportions with the fallback chain.

        Order: current-window neighbor histograms, then previous-window
        (window_index - 1 only), then the node's own histogram from
        ``own_history`` (a (window_index, channel) -> NoisyHistogram
        mapping). The result is counts averaged and divided by the window
        size.
        """
        current = self.collect_neighbor_histograms(node, window_index, channel)
        if current:
            return average_histograms(current) / window_size
        previous = self.collect_neighbor_histograms(node, window_index - 1, channel)
        if previous:
            return average_histograms(previous) / window_size
        own = own_history[(window_index, channel)]
        return np.asarray(own.counts, dtype=float) / window_size

    def clear(self) -> None:
        """Drop all mailboxes (ledger is kept; it is cumulative by contract)."""
        self._boxes.clear()


def dump_traffic_csv(ledger: TrafficLedger, path) -> None:
    with open(path, "w") as fh:
        fh.write("sender,receiver,messages,bytes\n")
        for sender, receiver, msgs, nbytes in ledger.rows():
            fh.write(f"{sender},{receiver},{msgs},{nbytes}\n")
