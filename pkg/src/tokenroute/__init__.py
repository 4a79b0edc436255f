"""Token-level routing between a small local model and a cloud large model.

A lightweight MLP router scores each decode position from the small model's
last-layer hidden state; low-confidence positions are shipped over a
self-contained wire schema to a serving endpoint, and the device reconciles
its KV cache with the returned tokens. The package also covers router
training from shortcut preference labels, latency-faithful benchmarking,
and the serving/gateway HTTP surface.
"""

from .types import (
    GenerationConfig,
    KvPolicy,
    Mode,
    Route,
    TaggedToken,
    TokenRouteError,
    validate_config,
)
from .engine import (
    BOS_ID,
    EOS_ID,
    ByteTokenizer,
    KvCache,
    ModelWeights,
    StepOutput,
    decode_step,
    full_forward,
    greedy_next,
    load_weights,
    prefill,
    random_weights,
    sample_next,
    save_weights,
)
from .router import (
    CiterThreshold,
    CollmDeferral,
    RouterModel,
    RoutingDecision,
    decide,
    load_router,
    random_router,
    route_token,
    save_router,
    score,
)
from .trainer import (
    PreferenceLabel,
    TrainConfig,
    TrainingExample,
    build_dataset,
    iterate,
    shortcut_label,
    train,
)
from .wire import (
    PreviousDecision,
    ResponseToken,
    RoutingRequest,
    RoutingResponse,
    parse_request,
    parse_response,
    serialize_request,
    serialize_response,
)
from .server import (
    Backend,
    EchoBackend,
    EngineBackend,
    OracleBackend,
    ServingConfig,
    TokenServer,
)
from .orchestrator import (
    GenerationResult,
    HttpClient,
    LatencyModel,
    LocalClient,
    SessionRecord,
    generate,
    read_event_log,
    stream_generate,
    write_event_log,
)
from .metrics import RequestMetrics, SweepRow, aggregate, compute, write_sweep_csv
from .bench import OracleTask, Scorer, TaskItem, TaskSet, make_oracle_task, sweep
from .bench import score as score_outputs
from .clock import MonotonicClock, SimulatedClock

__version__ = "0.1.0"
