"""Tissue-oxygenation estimation toolkit.

Simulates oxygenation-labeled reflectance spectra with voxel Monte-Carlo
photon transport, adapts them to a snapshot multispectral camera, trains
plain and domain-adversarial regressors, and validates against a linear
unmixing baseline, an exponential lactate fit, and inference timing.
"""

from ._accel import active_backend, set_backend
from .clinical import (
    Frame,
    LactateFit,
    Roi,
    RoiMeasurement,
    TimingReport,
    benchmark_inference,
    calibrate_frame,
    demosaic_bilinear,
    fit_lactate_exponential,
    load_roi_manifest,
    render_oxygenation_map,
    roi_around,
    roi_oxygenation,
)
from .config import PipelineConfig, default_config, load_config
from .dataset import (
    Dataset,
    DistortionSpec,
    augment_noise,
    balanced_batches,
    export_csv,
    generate_dataset,
    load_dataset,
    make_pseudo_real,
    random_split,
    save_dataset,
    stratified_split,
)
from .errors import (
    AbsorbanceError,
    CalibrationError,
    ConfigError,
    DataError,
    DataFormatError,
    FitError,
    NormalizationError,
    NumericError,
    OximapError,
    RangeError,
    ShapeError,
    StratificationError,
    TrainingError,
)
from .network import (
    LayerSpec,
    Network,
    cnn_spec,
    fcn_spec,
    fold_inference_weights,
    infer_map,
    load_model,
    save_model,
)
from .optics import (
    DEFAULT_PRIOR_RANGES,
    ExtinctionTable,
    LayerParams,
    PriorConfig,
    TissueSample,
    optical_properties,
    sample_tissue,
)
from .rng import derive_key, substream, uniform_from
from .spectral import (
    BandSpectrum,
    CameraConfig,
    CameraModel,
    LabeledSample,
    adapt_to_camera,
    auc_normalize,
    label_oxygenation,
    make_camera_model,
)
from .training import (
    Adam,
    PlateauScheduler,
    TrainConfig,
    TrainHistory,
    bce_with_logits,
    mse,
    train_adversarial,
    train_regressor,
)
from .transport import (
    DEFAULT_WAVELENGTHS,
    GridSpec,
    SimulatedSpectrum,
    TransportConfig,
    TransportResult,
    VoxelGrid,
    penetration_depth,
    simulate_spectrum,
    simulate_wavelength,
)
from .unmixing import EndmemberMatrix, build_endmembers, unmix_map, unmix_so2

__version__ = "0.1.0"
