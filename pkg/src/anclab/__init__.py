"""anclab: a feedforward active-noise-control research engine.

Simulates a nonlinear ANC plant (image-method rooms, loudspeaker
saturation, measurement noise), provides classical adaptive-filter
baselines, and trains and evaluates a meta-learned delayless subband
controller whose update rule is an attention-RNN operating on complex
subband features.
"""

from .acoustics import (AcousticPath, EpisodeTrace, PlantState, RoomSpec,
                        SaturationSpec, filtered_reference, image_method_rir,
                        main_delay_path, make_plant, plant_step, saturate)
from .baselines import (AdaptiveFilterState, SubbandLmsState, dsnfxlms_fullband,
                        dsnfxlms_update, fxlms_update, nfxlms_update)
from .dsp import DelayLine, fft, fir_filter, ifft, resample_to_16k
from .errors import AnclabError, ConfigurationError, InputError, InternalInvariantError
from .filterbank import (FilterBank, SubbandFrame, SubbandWeights, analysis_coeffs,
                         design_prototype, stack_direct, stack_fft1, subband_analyze,
                         subband_features)
from .harness import (MetricsRecord, Scenario, TimingReport, make_dataset,
                      measure_update_time, nmse, psd, run_episode)
from .model import (ModelDims, ModelParams, compress_input, constrain_gradient,
                    count_params_flops, forward, init_params, load_checkpoint,
                    save_checkpoint)
from .trainer import (Episode, EpisodeBatch, MetaConfig, OptimizerState, adam_init,
                      adam_step, inner_loop, prepare_episodes, train, variant_features)

__version__ = "0.1.0"
