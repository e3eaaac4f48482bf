//! Model files: a text manifest followed by the `NRB1` arrays it lists.
//!
//! ```text
//! NRBM 1
//! step=1200
//! encoder.input=3x16x16
//! encoder.0=conv stride=2x2 padding=0x0
//! encoder.1=act leaky_relu(0.1)
//! decoder.input=4x4x4
//! decoder.4=upsample 4
//! ...
//! arrays=6
//! end
//! <kernels of every conv layer in order, encoder first, then the codebook>
//! ```

use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};
use crate::io::RawArray;
use crate::network::{Layer, NetworkSpec, Role};
use crate::quantizer::Codebook;
use crate::tensor::{Activation, ConvLayer, Kernel4, Shape3};
use crate::train::ModelState;

pub const HEADER: &str = "NRBM 1";

fn fmt_pair(p: (usize, usize)) -> String {
    format!("{}x{}", p.0, p.1)
}

fn manifest(state: &ModelState) -> String {
    let mut m = format!("{HEADER}\nstep={}\n", state.step);
    for net in [&state.encoder, &state.decoder] {
        let role = net.role.as_str();
        let s = net.input_shape;
        let _ = writeln!(m, "{role}.input={}", s);
        for (i, layer) in net.layers.iter().enumerate() {
            let desc = match layer {
                Layer::Conv(c) => format!("conv stride={} padding={}", fmt_pair(c.stride), fmt_pair(c.padding)),
                Layer::Act(a) => format!("act {}", a.name()),
                Layer::Upsample(f) => format!("upsample {f}"),
            };
            let _ = writeln!(m, "{role}.{i}={desc}");
        }
    }
    let arrays = state.encoder.conv_layers().count() + state.decoder.conv_layers().count() + 1;
    let _ = writeln!(m, "arrays={arrays}\nend");
    m
}

pub fn to_bytes(state: &ModelState) -> Vec<u8> {
    let mut out = manifest(state).into_bytes();
    for net in [&state.encoder, &state.decoder] {
        for c in net.conv_layers() {
            out.extend(RawArray::from_kernel(&c.kernel).to_bytes());
        }
    }
    out.extend(state.codebook.to_raw().to_bytes());
    out
}

fn parse_usize(s: &str, what: &str) -> std::result::Result<usize, String> {
    s.parse().map_err(|_| format!("bad {what} `{s}`"))
}

fn parse_pair(s: &str) -> std::result::Result<(usize, usize), String> {
    let (a, b) = s.split_once('x').ok_or_else(|| format!("bad pair `{s}`"))?;
    Ok((parse_usize(a, "pair")?, parse_usize(b, "pair")?))
}

fn parse_shape(s: &str) -> std::result::Result<Shape3, String> {
    let parts: Vec<_> = s.split('x').collect();
    match parts[..] {
        [c, h, w] => Ok(Shape3::new(
            parse_usize(c, "shape")?,
            parse_usize(h, "shape")?,
            parse_usize(w, "shape")?,
        )),
        _ => Err(format!("bad shape `{s}`")),
    }
}

enum LayerDesc {
    Conv { stride: (usize, usize), padding: (usize, usize) },
    Act(Activation),
    Upsample(usize),
}

fn parse_layer(desc: &str) -> std::result::Result<LayerDesc, String> {
    let (kind, rest) = desc.split_once(' ').unwrap_or((desc, ""));
    match kind {
        "conv" => {
            let mut stride = None;
            let mut padding = None;
            for kv in rest.split_whitespace() {
                match kv.split_once('=') {
                    Some(("stride", v)) => stride = Some(parse_pair(v)?),
                    Some(("padding", v)) => padding = Some(parse_pair(v)?),
                    _ => return Err(format!("bad conv field `{kv}`")),
                }
            }
            Ok(LayerDesc::Conv {
                stride: stride.ok_or("conv without stride")?,
                padding: padding.ok_or("conv without padding")?,
            })
        }
        "act" => Activation::parse(rest.trim()).map(LayerDesc::Act).map_err(|e| e.to_string()),
        "upsample" => Ok(LayerDesc::Upsample(parse_usize(rest.trim(), "upsample factor")?)),
        _ => Err(format!("unknown layer kind `{kind}`")),
    }
}

struct Manifest {
    step: u64,
    nets: Vec<(Role, Shape3, Vec<LayerDesc>)>,
    arrays: usize,
}

fn parse_manifest(text: &str) -> std::result::Result<Manifest, String> {
    let mut lines = text.lines();
    if lines.next() != Some(HEADER) {
        return Err("missing NRBM header".into());
    }
    let mut step = None;
    let mut arrays = None;
    let mut nets: Vec<(Role, Shape3, Vec<LayerDesc>)> = Vec::new();
    for line in lines {
        if line == "end" {
            break;
        }
        let (key, value) = line.split_once('=').ok_or_else(|| format!("bad manifest line `{line}`"))?;
        match key {
            "step" => step = Some(value.parse::<u64>().map_err(|_| format!("bad step `{value}`"))?),
            "arrays" => arrays = Some(parse_usize(value, "array count")?),
            _ => {
                let (role, field) = key.split_once('.').ok_or_else(|| format!("unknown key `{key}`"))?;
                let role = match role {
                    "encoder" => Role::Encoder,
                    "decoder" => Role::Decoder,
                    _ => return Err(format!("unknown key `{key}`")),
                };
                if field == "input" {
                    nets.push((role, parse_shape(value)?, Vec::new()));
                    continue;
                }
                let net = nets
                    .last_mut()
                    .filter(|n| n.0 == role)
                    .ok_or_else(|| format!("layer `{key}` before {}.input", role.as_str()))?;
                if parse_usize(field, "layer index")? != net.2.len() {
                    return Err(format!("layer `{key}` out of order"));
                }
                net.2.push(parse_layer(value)?);
            }
        }
    }
    Ok(Manifest {
        step: step.ok_or("missing step")?,
        nets,
        arrays: arrays.ok_or("missing array count")?,
    })
}

pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<ModelState> {
    let fmt_err = |reason: String| Error::Format {
        path: path.to_owned(),
        reason,
    };
    let end = bytes
        .windows(5)
        .position(|w| w == b"\nend\n")
        .ok_or_else(|| fmt_err("manifest has no `end` line".into()))?
        + 5;
    let text = std::str::from_utf8(&bytes[..end]).map_err(|_| fmt_err("manifest is not UTF-8".into()))?;
    let m = parse_manifest(text).map_err(fmt_err)?;
    let mut off = end;
    let mut arrays = Vec::with_capacity(m.arrays);
    for _ in 0..m.arrays {
        let (arr, used) = RawArray::decode(&bytes[off..]).map_err(fmt_err)?;
        arrays.push(arr);
        off += used;
    }
    if off != bytes.len() {
        return Err(fmt_err(format!("{} trailing bytes", bytes.len() - off)));
    }
    let mut arrays = arrays.into_iter();
    let mut nets = Vec::new();
    for (role, input, descs) in m.nets {
        let mut layers = Vec::with_capacity(descs.len());
        for d in descs {
            layers.push(match d {
                LayerDesc::Conv { stride, padding } => {
                    let kernel: Kernel4 = arrays
                        .next()
                        .ok_or_else(|| fmt_err("fewer arrays than conv layers".into()))?
                        .into_kernel()?;
                    Layer::Conv(ConvLayer::new(kernel, stride, padding)?)
                }
                LayerDesc::Act(a) => Layer::Act(a),
                LayerDesc::Upsample(f) => Layer::Upsample(f),
            });
        }
        nets.push(NetworkSpec::new(role, input, layers)?);
    }
    let codebook = Codebook::from_raw(arrays.next().ok_or_else(|| fmt_err("missing codebook array".into()))?)?;
    if arrays.next().is_some() {
        return Err(fmt_err("more arrays than the manifest uses".into()));
    }
    let mut nets = nets.into_iter();
    match (nets.next(), nets.next(), nets.next()) {
        (Some(encoder), Some(decoder), None) => ModelState::new(encoder, decoder, codebook, m.step),
        _ => Err(fmt_err("expected one encoder and one decoder".into())),
    }
}

pub fn save_model(path: &Path, state: &ModelState) -> Result<()> {
    std::fs::write(path, to_bytes(state)).map_err(|source| Error::Io {
        path: path.to_owned(),
        source,
    })
}

pub fn load_model(path: &Path) -> Result<ModelState> {
    let bytes = std::fs::read(path).map_err(|source| Error::Io {
        path: path.to_owned(),
        source,
    })?;
    from_bytes(&bytes, path)
}
