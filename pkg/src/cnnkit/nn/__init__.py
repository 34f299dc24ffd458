from .blocks import (BigLittleStage, BigLittleStem, BlurPool, Bottleneck, DropBlock, SEModule, SKUnit,
                     biglittle_merge, binomial_kernel, blur_pool, dropblock, dropblock_gamma,
                     strided_conv_with_aa)
from .cost import CostReport, count_flops, count_params
from .model import BlockInstance, ModelGraph, ablate_residuals, build_model, zero_gamma_init
from .module import BatchNorm2d, Conv2d, Linear, Module, Sequential
from .spec import (AAConfig, BigLittleConfig, DropBlockConfig, ModelSpec, SEConfig, SKConfig, SpecError,
                   preset)
