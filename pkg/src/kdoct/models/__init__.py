from .checkpoint import (
    build_model,
    file_hash,
    load_checkpoint,
    load_checkpoint_into,
    save_checkpoint,
    state_hash,
)
from .layers import Linear, Module, Parameter, Sequential, count_parameters
from .student import EfficientStudent, StudentConfig, build_student
from .teacher import ConvNeXtTeacher, TeacherConfig, build_teacher

__all__ = [
    "ConvNeXtTeacher",
    "EfficientStudent",
    "Linear",
    "Module",
    "Parameter",
    "Sequential",
    "StudentConfig",
    "TeacherConfig",
    "build_model",
    "build_student",
    "build_teacher",
    "count_parameters",
    "file_hash",
    "load_checkpoint",
    "load_checkpoint_into",
    "save_checkpoint",
    "state_hash",
]
