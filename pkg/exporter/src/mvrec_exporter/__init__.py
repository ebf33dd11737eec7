"""Embedding exporter for the mvrec pipeline.

Standalone tool: reads a dataset manifest and a views file, renders every
view's patch and alpha mask, runs an image encoder over them, and writes an
MVE1 embedding file plus a coverage report. It communicates with the main
package purely through those file formats.
"""

__version__ = "0.1.0"
