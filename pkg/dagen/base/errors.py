# -*- coding: utf-8 -*-
import json


class DagenError(Exception):
    """base error of all pipeline stages.

    :param code: numeric code, used as exit status by the command line
    :param status: machine readable slug
    :param message: human readable message
    """
    code = 1
    status = "error"

    def __init__(self, message, status=None, code=None):
        super().__init__(message)
        self.message = message
        if status is not None:
            self.status = status
        if code is not None:
            self.code = code


class ConfigError(DagenError):
    code = 2
    status = "invalid_config"


class ConditionError(DagenError):
    code = 3
    status = "invalid_condition"


class FrameTooSmallError(ConditionError):
    status = "frame_too_small"


class PromptError(DagenError):
    code = 3
    status = "invalid_prompt"


class RCFError(DagenError):
    code = 4
    status = "invalid_fusion_input"


class DiffusionError(DagenError):
    code = 5
    status = "diffusion_error"


class DecodeFailedError(DiffusionError):
    status = "decode_failed"


class TrainingDivergedError(DiffusionError):
    status = "training_diverged"

    def __init__(self, message, last_good=None):
        super().__init__(message)
        self.last_good = last_good


class AdaptationError(DagenError):
    code = 6
    status = "adaptation_error"


class MetricError(DagenError):
    code = 7
    status = "metric_error"


class CheckpointError(DagenError):
    code = 8
    status = "checkpoint_error"


class ManifestCollisionError(DagenError):
    code = 9
    status = "manifest_collision"


class StageRefusedError(DagenError):
    code = 10
    status = "config_hash_mismatch"


class PipelineError(DagenError):
    code = 11
    status = "pipeline_error"


def format_error(exc):
    return json.dumps({
        "status": getattr(exc, "status", "error"),
        "message": getattr(exc, "message", str(exc)),
    })
