//! Screen preprocessing: binarization, resizing, difference frames, the two
//! state encodings and the occlusion bar.

use std::collections::VecDeque;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const OBS_SIZE: usize = 80;
pub const BINARIZE_THRESHOLD: f32 = 0.5;
/// Weights of the four most recent binary frames, newest first.
pub const GRAYSCALE_WEIGHTS: [f32; 4] = [1.0, 0.75, 0.5, 0.25];
pub const OCCLUSION_HEIGHT: usize = 3;
/// Number of distinct bar placements on an 80-row observation.
pub const OCCLUSION_POSITIONS: usize = OBS_SIZE - OCCLUSION_HEIGHT;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum InputMode {
    Binary,
    Grayscale,
}

impl fmt::Display for InputMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            InputMode::Binary => "binary",
            InputMode::Grayscale => "grayscale",
        })
    }
}

impl FromStr for InputMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "binary" => Ok(InputMode::Binary),
            "grayscale" | "gray" => Ok(InputMode::Grayscale),
            other => Err(Error::invalid("input mode", format!("unknown mode {other:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Observation {
    pub state: Tensor,
    pub mode: InputMode,
}

/// Nearest-neighbour resize of an `H x W` image.
pub fn resize_nearest(image: &Tensor, out_h: usize, out_w: usize) -> Result<Tensor> {
    let shape = image.shape();
    if shape.len() != 2 {
        return Err(Error::dim(format!("resize expects H x W, got {:?}", shape)));
    }
    let (h, w) = (shape[0], shape[1]);
    let src = image.data();
    let mut out = Vec::with_capacity(out_h * out_w);
    for y in 0..out_h {
        let sy = y * h / out_h;
        for x in 0..out_w {
            out.push(src[sy * w + x * w / out_w]);
        }
    }
    Tensor::new(vec![out_h, out_w], out)
}

pub fn binarize(image: &Tensor) -> Tensor {
    image.map(|v| if v >= BINARIZE_THRESHOLD { 1.0 } else { 0.0 })
}

/// Resize to 80x80 when needed, then binarize.
pub fn to_binary_frame(image: &Tensor) -> Result<Tensor> {
    if image.shape() == [OBS_SIZE, OBS_SIZE] {
        Ok(binarize(image))
    } else {
        Ok(binarize(&resize_nearest(image, OBS_SIZE, OBS_SIZE)?))
    }
}

/// `max(current - previous, 0)` per pixel.
pub fn difference_frame(previous: &Tensor, current: &Tensor) -> Result<Tensor> {
    Ok(current.sub(previous)?.map(|v| v.max(0.0)))
}

fn check_frames(frames: &[Tensor]) -> Result<()> {
    if frames.is_empty() {
        return Err(Error::invalid("frame buffer", "no frames"));
    }
    for f in frames {
        if f.shape() != [OBS_SIZE, OBS_SIZE] {
            return Err(Error::dim(format!(
                "frame {:?}, expected [{OBS_SIZE}, {OBS_SIZE}]",
                f.shape()
            )));
        }
    }
    Ok(())
}

/// Left-pads `frames` (oldest first) to `n` by repeating the oldest.
fn padded(frames: &[Tensor], n: usize) -> Vec<&Tensor> {
    let start = frames.len().saturating_sub(n);
    let recent = &frames[start..];
    let mut out: Vec<&Tensor> = std::iter::repeat_n(&recent[0], n - recent.len()).collect();
    out.extend(recent.iter());
    out
}

/// Binary state from the last five binarized frames (oldest first): the four
/// most recent difference frames are summed and every positive pixel set to 1.
pub fn preprocess_binary(frames: &[Tensor]) -> Result<Observation> {
    check_frames(frames)?;
    let f = padded(frames, 5);
    let mut acc = Tensor::zeros(&[OBS_SIZE, OBS_SIZE]);
    for pair in f.windows(2) {
        acc = acc.add(&difference_frame(pair[0], pair[1])?)?;
    }
    Ok(Observation {
        state: acc.map(|v| if v >= 1.0 { 1.0 } else { 0.0 }),
        mode: InputMode::Binary,
    })
}

/// Time-weighted sum of the last four binary frames (oldest first):
/// `S = F_t + 0.75 F_{t-1} + 0.5 F_{t-2} + 0.25 F_{t-3}`.
pub fn preprocess_grayscale(frames: &[Tensor]) -> Result<Observation> {
    check_frames(frames)?;
    let f = padded(frames, 4);
    let (f0, f1, f2, f3) = (f[3].data(), f[2].data(), f[1].data(), f[0].data());
    let [w0, w1, w2, w3] = GRAYSCALE_WEIGHTS;
    let data = (0..OBS_SIZE * OBS_SIZE)
        .map(|i| f0[i] * w0 + f1[i] * w1 + f2[i] * w2 + f3[i] * w3)
        .collect();
    Ok(Observation {
        state: Tensor::new(vec![OBS_SIZE, OBS_SIZE], data)?,
        mode: InputMode::Grayscale,
    })
}

/// Zero rows `bar_row..bar_row + 3`.
pub fn apply_occlusion(obs: &Observation, bar_row: usize) -> Result<Observation> {
    let mut out = obs.clone();
    occlude_in_place(out.state.data_mut(), bar_row)?;
    Ok(out)
}

pub fn occlude_in_place(pixels: &mut [f32], bar_row: usize) -> Result<()> {
    if bar_row >= OCCLUSION_POSITIONS {
        return Err(Error::invalid(
            "occlusion bar",
            format!("row {bar_row} outside 0..={}", OCCLUSION_POSITIONS - 1),
        ));
    }
    if pixels.len() != OBS_SIZE * OBS_SIZE {
        return Err(Error::dim(format!("occlusion on {} pixels", pixels.len())));
    }
    pixels[bar_row * OBS_SIZE..(bar_row + OCCLUSION_HEIGHT) * OBS_SIZE].fill(0.0);
    Ok(())
}

/// Rolling buffer of binarized screens that produces observations.
///
/// Binary states hold motion only; grayscale states weight the binarized
/// screens themselves, so the resting paddle and the bricks stay visible.
#[derive(Clone, Debug)]
pub struct FrameHistory {
    frames: VecDeque<Tensor>,
    mode: InputMode,
}

impl FrameHistory {
    pub fn new(mode: InputMode) -> Self {
        FrameHistory {
            frames: VecDeque::with_capacity(5),
            mode,
        }
    }

    pub fn mode(&self) -> InputMode {
        self.mode
    }

    pub fn clear(&mut self) {
        self.frames.clear();
    }

    pub fn push(&mut self, screen: &Tensor) -> Result<()> {
        if self.frames.len() == 5 {
            self.frames.pop_front();
        }
        self.frames.push_back(to_binary_frame(screen)?);
        Ok(())
    }

    pub fn observe(&self) -> Result<Observation> {
        let frames: Vec<Tensor> = self.frames.iter().cloned().collect();
        match self.mode {
            InputMode::Binary => preprocess_binary(&frames),
            InputMode::Grayscale => preprocess_grayscale(&frames),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn frame_with(pixels: &[(usize, usize)]) -> Tensor {
        let mut t = Tensor::zeros(&[OBS_SIZE, OBS_SIZE]);
        for &(r, c) in pixels {
            t.data_mut()[r * OBS_SIZE + c] = 1.0;
        }
        t
    }

    #[test]
    fn identical_frames_give_empty_binary_state() {
        let f = frame_with(&[(3, 3), (40, 41)]);
        let obs = preprocess_binary(&vec![f; 5]).unwrap();
        assert!(obs.state.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn moving_bar_leaves_leading_edges() {
        // a 3-pixel-wide block moving right one pixel per frame on row 10
        let frames: Vec<Tensor> = (0..5)
            .map(|t| frame_with(&[(10, 20 + t), (10, 21 + t), (10, 22 + t)]))
            .collect();
        let obs = preprocess_binary(&frames).unwrap();
        // hand-executed: frame t adds column 22+t and drops 19+t
        let mut expected = Tensor::zeros(&[OBS_SIZE, OBS_SIZE]);
        for t in 1..5 {
            expected.data_mut()[10 * OBS_SIZE + 22 + t] = 1.0;
        }
        assert_eq!(obs.state, expected);
    }

    #[test]
    fn short_buffer_is_padded_with_oldest() {
        let obs = preprocess_binary(&[frame_with(&[(1, 1)])]).unwrap();
        assert!(obs.state.data().iter().all(|&v| v == 0.0));
        assert!(preprocess_binary(&[]).is_err());
    }

    #[test]
    fn grayscale_weights() {
        let ones = Tensor::full(&[OBS_SIZE, OBS_SIZE], 1.0);
        let zeros = Tensor::zeros(&[OBS_SIZE, OBS_SIZE]);
        let all = preprocess_grayscale(&vec![ones.clone(); 4]).unwrap();
        assert!(all.state.data().iter().all(|&v| v == 2.5));
        let newest = preprocess_grayscale(&[zeros.clone(), zeros.clone(), zeros.clone(), ones.clone()]).unwrap();
        assert!(newest.state.data().iter().all(|&v| v == 1.0));
        let oldest = preprocess_grayscale(&[ones, zeros.clone(), zeros.clone(), zeros]).unwrap();
        assert!(oldest.state.data().iter().all(|&v| v == 0.25));
    }

    #[test]
    fn occlusion_rows() {
        let obs = Observation {
            state: Tensor::full(&[OBS_SIZE, OBS_SIZE], 1.0),
            mode: InputMode::Binary,
        };
        let top = apply_occlusion(&obs, 0).unwrap();
        assert_eq!(top.state.data().iter().sum::<f32>(), (77 * 80) as f32);
        assert!(top.state.data()[..3 * 80].iter().all(|&v| v == 0.0));
        let bottom = apply_occlusion(&obs, 76).unwrap();
        assert!(bottom.state.data()[76 * 80..79 * 80].iter().all(|&v| v == 0.0));
        assert!(bottom.state.data()[79 * 80..].iter().all(|&v| v == 1.0));
        assert_eq!(apply_occlusion(&top, 0).unwrap(), top);
        assert!(apply_occlusion(&obs, 77).is_err());
    }

    #[test]
    fn resize_nearest_downsamples() {
        let big = Tensor::new(vec![160, 160], (0..160 * 160).map(|i| (i % 160) as f32).collect()).unwrap();
        let small = resize_nearest(&big, 80, 80).unwrap();
        assert_eq!(small.shape(), &[80, 80]);
        assert_eq!(small.data()[1], 2.0);
        let bin = to_binary_frame(&Tensor::full(&[210, 160], 0.7)).unwrap();
        assert!(bin.data().iter().all(|&v| v == 1.0));
    }
}
