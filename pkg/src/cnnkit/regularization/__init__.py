from .autoaugment import IMAGENET_POLICY, MAGNITUDES, OPS, AugPolicy, apply_policy, posterize
from .preprocess import PreprocessConfig, eval_crop_box, eval_preprocess, train_preprocess
from .targets import (MixedBatch, kd_loss, label_smooth, mixup_type1, mixup_type2, one_hot,
                      sample_lambda, soft_cross_entropy)
from .teacher import TeacherLogitStore, TeacherStoreError
