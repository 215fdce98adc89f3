"""tagstream: media-over-IP frame transport with an audio-tagging relay.

Senders publish audio/video/metadata frames over TCP and announce
themselves over UDP; the relay passes a source through untouched while a
side-chain windows the audio, runs a tagger, and injects the predictions
back into the stream as XML metadata frames.
"""

from .frames import (
    AudioFrame,
    DecodeError,
    EncodingError,
    Frame,
    MetadataFrame,
    NeedMoreData,
    ProtocolError,
    VideoFrame,
    decode_frame,
    encode_frame,
)
from .discovery import Announcer, Finder, SourceAdvertisement, start_announcer
from .relay import Relay, RelayConfig, RelayStats, run_relay
from .sources import SignalSpec, WavClip, play, read_wav, render
from .tagging import (
    ExternalTaggerAdapter,
    ReferenceSpectralTagger,
    TagPrediction,
    TagResult,
    TaggerUnavailable,
    build_metadata_xml,
    make_tagger,
    parse_metadata_xml,
)
from .transport import END_OF_STREAM, TIMEOUT, ConnectError, Receiver, Sender
from .windowing import SampleWindow, WindowAssembler, WindowConfig, extract_samples

__version__ = "0.1.0"

__all__ = [
    "AudioFrame",
    "Announcer",
    "ConnectError",
    "DecodeError",
    "EncodingError",
    "END_OF_STREAM",
    "ExternalTaggerAdapter",
    "Finder",
    "Frame",
    "MetadataFrame",
    "NeedMoreData",
    "ProtocolError",
    "Receiver",
    "ReferenceSpectralTagger",
    "Relay",
    "RelayConfig",
    "RelayStats",
    "SampleWindow",
    "Sender",
    "SignalSpec",
    "SourceAdvertisement",
    "TIMEOUT",
    "TagPrediction",
    "TagResult",
    "TaggerUnavailable",
    "VideoFrame",
    "WavClip",
    "WindowAssembler",
    "WindowConfig",
    "build_metadata_xml",
    "decode_frame",
    "encode_frame",
    "extract_samples",
    "make_tagger",
    "parse_metadata_xml",
    "play",
    "read_wav",
    "render",
    "run_relay",
    "start_announcer",
]
