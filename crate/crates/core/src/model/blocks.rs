use super::{ActivationKind, ModelError};
use crate::nn::{
    ActivationLayer, BatchNormLayer, Conv2dLayer, ForwardCtx, Param, ParamBuilder,
    DEFAULT_NEGATIVE_SLOPE,
};
use crate::tensor::{Graph, Scalar, TensorError, Var};

/// Convolution followed by batch norm and an activation. Convolutions
/// feeding a batch norm carry no bias of their own.
#[derive(Debug, Clone)]
pub struct ConvUnit {
    pub conv: Conv2dLayer,
    pub bn: BatchNormLayer,
    pub act: ActivationLayer,
}

impl ConvUnit {
    pub fn new(
        pb: &mut ParamBuilder,
        name: &str,
        channels: usize,
        kernel: (usize, usize),
        groups: usize,
        activation: ActivationKind,
    ) -> Result<Self, ModelError> {
        pb.scope(name, |pb| {
            let conv = Conv2dLayer::new(pb, "conv", channels, channels, kernel, groups, false)?;
            let bn = BatchNormLayer::new(pb, "bn", channels);
            let act = match activation {
                ActivationKind::PRelu => ActivationLayer::prelu(pb, "act", channels),
                ActivationKind::SPRelu => ActivationLayer::sprelu(pb, "act"),
                ActivationKind::LRelu => ActivationLayer::LRelu(DEFAULT_NEGATIVE_SLOPE),
            };
            Ok(Self { conv, bn, act })
        })
    }

    pub fn forward<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        x: Var,
        ctx: &mut ForwardCtx,
    ) -> Result<Var, TensorError> {
        let y = self.conv.forward(g, x)?;
        let y = self.bn.forward(g, y, ctx)?;
        self.act.forward(g, y)
    }

    pub fn visit_params<'a>(&'a self, f: &mut dyn FnMut(&'a Param)) {
        self.conv.visit_params(f);
        self.bn.visit_params(f);
        self.act.visit_params(f);
    }

    pub fn visit_params_mut(&mut self, f: &mut dyn FnMut(&mut Param)) {
        self.conv.visit_params_mut(f);
        self.bn.visit_params_mut(f);
        self.act.visit_params_mut(f);
    }
}

/// Encoder residual block: factorized 1×9 then 9×1 on two channels.
#[derive(Debug, Clone)]
pub struct EncoderBlock {
    pub row: ConvUnit,
    pub col: ConvUnit,
}

impl EncoderBlock {
    pub fn new(
        pb: &mut ParamBuilder,
        name: &str,
        activation: ActivationKind,
    ) -> Result<Self, ModelError> {
        pb.scope(name, |pb| {
            Ok(Self {
                row: ConvUnit::new(pb, "row", 2, (1, 9), 1, activation)?,
                col: ConvUnit::new(pb, "col", 2, (9, 1), 1, activation)?,
            })
        })
    }

    pub fn forward<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        x: Var,
        ctx: &mut ForwardCtx,
    ) -> Result<Var, TensorError> {
        let y = self.row.forward(g, x, ctx)?;
        let y = self.col.forward(g, y, ctx)?;
        g.add(x, y)
    }

    pub fn units(&self) -> [&ConvUnit; 2] {
        [&self.row, &self.col]
    }

    pub fn units_mut(&mut self) -> [&mut ConvUnit; 2] {
        [&mut self.row, &mut self.col]
    }
}

/// Decoder aggregated residual block.
///
/// The two-channel input is replicated into `groups` copies, passed through
/// grouped 7×7, 1×9 and 9×1 convolutions (two channels per group), summed
/// back to two channels and added to the input. This is the grouped
/// realization of `groups` parallel two-channel branches sharing one input.
#[derive(Debug, Clone)]
pub struct DecoderBlock {
    pub groups: usize,
    pub wide: ConvUnit,
    pub row: ConvUnit,
    pub col: ConvUnit,
}

impl DecoderBlock {
    pub fn new(
        pb: &mut ParamBuilder,
        name: &str,
        groups: usize,
        activation: ActivationKind,
    ) -> Result<Self, ModelError> {
        let ch = 2 * groups;
        pb.scope(name, |pb| {
            Ok(Self {
                groups,
                wide: ConvUnit::new(pb, "wide", ch, (7, 7), groups, activation)?,
                row: ConvUnit::new(pb, "row", ch, (1, 9), groups, activation)?,
                col: ConvUnit::new(pb, "col", ch, (9, 1), groups, activation)?,
            })
        })
    }

    pub fn forward<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        x: Var,
        ctx: &mut ForwardCtx,
    ) -> Result<Var, TensorError> {
        let y = g.replicate_channels(x, self.groups)?;
        let y = self.wide.forward(g, y, ctx)?;
        let y = self.row.forward(g, y, ctx)?;
        let y = self.col.forward(g, y, ctx)?;
        let y = g.group_sum(y, self.groups)?;
        g.add(x, y)
    }

    pub fn units(&self) -> [&ConvUnit; 3] {
        [&self.wide, &self.row, &self.col]
    }

    pub fn units_mut(&mut self) -> [&mut ConvUnit; 3] {
        [&mut self.wide, &mut self.row, &mut self.col]
    }
}
