"""Tracing and logging setup for the command line."""

import logging
import os
from typing import Optional

from opentelemetry import trace
from opentelemetry.exporter.otlp.proto.http.trace_exporter import OTLPSpanExporter
from opentelemetry.sdk.trace import TracerProvider
from opentelemetry.sdk.trace.export import BatchSpanProcessor, ConsoleSpanExporter, SimpleSpanProcessor


def setup_tracing(mode: Optional[str] = None) -> Optional[TracerProvider]:
    """
    Install a tracer provider according to ESCELLS_TRACE.

    Args:
        mode: "console", "otlp" or None; defaults to the ESCELLS_TRACE environment variable

    Returns:
        The installed provider, or None when tracing stays disabled
    """
    mode = (mode if mode is not None else os.getenv("ESCELLS_TRACE", "")).strip().lower()
    if not mode:
        return None

    provider = TracerProvider()
    if mode == "console":
        provider.add_span_processor(SimpleSpanProcessor(ConsoleSpanExporter()))
    elif mode == "otlp":
        # endpoint comes from OTEL_EXPORTER_OTLP_ENDPOINT
        provider.add_span_processor(BatchSpanProcessor(OTLPSpanExporter()))
    else:
        print(f"⚠ Unknown ESCELLS_TRACE value '{mode}', tracing disabled")
        return None
    trace.set_tracer_provider(provider)
    return provider


def setup_logging(verbose: bool = False):
    level = logging.DEBUG if verbose else logging.INFO
    logging.basicConfig(level=level, format="%(asctime)s %(levelname)s %(name)s: %(message)s")
