//! Facial-region mixture of experts: patches are labelled with a facial region,
//! each region owns an affine expert, and the experts stand in for the shared key
//! projection of an attention layer.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::augmentation::landmarks::{rasterize_region, LandmarkSet, Region};

#[derive(Clone, Debug, Error, PartialEq)]
pub enum MoeError {
    #[error("dimension mismatch: {0}")]
    DimMismatch(String),
    #[error("patch {patch} has region id {id}, bank has {k} experts")]
    UnknownRegionId { patch: usize, id: u16, k: usize },
    #[error("invalid grid: {0}")]
    InvalidGrid(String),
    #[error("n_moe = {n_moe} exceeds {total} layers")]
    InvalidCount { n_moe: usize, total: usize },
    #[error("cls policy needs a dedicated expert but the bank has none")]
    MissingClsExpert,
    #[error("expert bank JSON: {0}")]
    Json(String),
}

/// How the class token gets its key.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClsPolicy {
    #[default]
    SharedKey,
    DedicatedExpert,
}

/// Per-patch region ids on a `grid_h × grid_w` grid, row-major. Ids run over
/// `1..=k_regions`; the last id is Background.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RegionMap {
    pub grid_h: usize,
    pub grid_w: usize,
    pub k_regions: usize,
    pub region_of: Vec<u16>,
    pub cls_policy: ClsPolicy,
}

impl RegionMap {
    pub fn new(
        grid_h: usize,
        grid_w: usize,
        k_regions: usize,
        region_of: Vec<u16>,
        cls_policy: ClsPolicy,
    ) -> Result<Self, MoeError> {
        if region_of.len() != grid_h * grid_w {
            return Err(MoeError::InvalidGrid(format!(
                "{} ids for a {grid_h}x{grid_w} grid",
                region_of.len()
            )));
        }
        if let Some((patch, &id)) = region_of
            .iter()
            .enumerate()
            .find(|(_, &id)| id == 0 || id as usize > k_regions)
        {
            return Err(MoeError::UnknownRegionId {
                patch,
                id,
                k: k_regions,
            });
        }
        Ok(Self {
            grid_h,
            grid_w,
            k_regions,
            region_of,
            cls_policy,
        })
    }

    /// Every patch in one region.
    pub fn uniform(grid_h: usize, grid_w: usize, k_regions: usize, id: u16) -> Result<Self, MoeError> {
        Self::new(grid_h, grid_w, k_regions, vec![id; grid_h * grid_w], ClsPolicy::SharedKey)
    }

    pub fn n_patches(&self) -> usize {
        self.region_of.len()
    }

    pub fn background_id(&self) -> u16 {
        self.k_regions as u16
    }

    /// Patch count per region id, index 0 for id 1.
    pub fn counts(&self) -> Vec<usize> {
        let mut c = vec![0; self.k_regions];
        for &id in &self.region_of {
            c[id as usize - 1] += 1;
        }
        c
    }
}

/// Labels each patch with the taxonomy region covering most of its pixels; ties go
/// to the lower id and uncovered patches to Background (id `taxonomy.len() + 1`).
///
/// Landmarks may fall partly or wholly outside the image; only the part of each
/// hull inside the canvas counts.
pub fn assign_regions(
    grid: (usize, usize),
    image: (usize, usize),
    landmarks: &LandmarkSet,
    taxonomy: &[Region],
) -> Result<RegionMap, MoeError> {
    let (gh, gw) = grid;
    let (h, w) = image;
    if gh == 0 || gw == 0 || h % gh != 0 || w % gw != 0 {
        return Err(MoeError::InvalidGrid(format!(
            "{gh}x{gw} patches do not tile a {h}x{w} image"
        )));
    }
    let (ph, pw) = (h / gh, w / gw);
    let background = taxonomy.len() as u16 + 1;
    let mut best: Vec<(usize, u16)> = vec![(0, background); gh * gw];
    for (pos, &region) in taxonomy.iter().enumerate() {
        let id = pos as u16 + 1;
        let bits = rasterize_region(landmarks, region, h, w);
        let mut cover = vec![0usize; gh * gw];
        for r in 0..h {
            for c in 0..w {
                if bits[r * w + c] {
                    cover[(r / ph) * gw + c / pw] += 1;
                }
            }
        }
        for (b, &n) in best.iter_mut().zip(&cover) {
            // strict > keeps the earlier (lower) id on ties
            if n > b.0 {
                *b = (n, id);
            }
        }
    }
    RegionMap::new(
        gh,
        gw,
        taxonomy.len() + 1,
        best.into_iter().map(|(_, id)| id).collect(),
        ClsPolicy::SharedKey,
    )
}

/// `y = W x + b` with a row-major `dim × dim` weight.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Affine {
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}

impl Affine {
    pub fn identity(dim: usize) -> Self {
        let mut weight = vec![0.0; dim * dim];
        for i in 0..dim {
            weight[i * dim + i] = 1.0;
        }
        Self {
            weight,
            bias: vec![0.0; dim],
        }
    }

    pub fn scaled_identity(dim: usize, s: f64) -> Self {
        let mut a = Self::identity(dim);
        a.weight.iter_mut().for_each(|v| *v *= s);
        a
    }

    pub fn dim(&self) -> usize {
        self.bias.len()
    }

    fn check(&self, dim: usize, what: &str) -> Result<(), MoeError> {
        if self.bias.len() != dim || self.weight.len() != dim * dim {
            return Err(MoeError::DimMismatch(format!(
                "{what}: weight {} / bias {} for dim {dim}",
                self.weight.len(),
                self.bias.len()
            )));
        }
        Ok(())
    }

    pub fn apply(&self, x: &[f64]) -> Vec<f64> {
        let d = self.dim();
        (0..d)
            .map(|i| {
                self.weight[i * d..(i + 1) * d]
                    .iter()
                    .zip(x)
                    .map(|(w, v)| w * v)
                    .sum::<f64>()
                    + self.bias[i]
            })
            .collect()
    }
}

/// One affine expert per region plus the baseline shared key map.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExpertBank {
    pub dim: usize,
    pub experts: Vec<Affine>,
    pub shared_key: Affine,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cls_expert: Option<Affine>,
}

impl ExpertBank {
    pub fn new(
        dim: usize,
        experts: Vec<Affine>,
        shared_key: Affine,
        cls_expert: Option<Affine>,
    ) -> Result<Self, MoeError> {
        let bank = Self {
            dim,
            experts,
            shared_key,
            cls_expert,
        };
        bank.validate()?;
        Ok(bank)
    }

    /// Every expert a copy of `shared_key`.
    pub fn from_shared(k_regions: usize, shared_key: Affine) -> Self {
        Self {
            dim: shared_key.dim(),
            experts: vec![shared_key.clone(); k_regions],
            shared_key,
            cls_expert: None,
        }
    }

    pub fn validate(&self) -> Result<(), MoeError> {
        self.shared_key.check(self.dim, "shared_key")?;
        for (k, e) in self.experts.iter().enumerate() {
            e.check(self.dim, &format!("expert {}", k + 1))?;
        }
        if let Some(c) = &self.cls_expert {
            c.check(self.dim, "cls_expert")?;
        }
        Ok(())
    }

    pub fn k_regions(&self) -> usize {
        self.experts.len()
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("bank serializes")
    }

    pub fn from_json(text: &str) -> Result<Self, MoeError> {
        let bank: Self = serde_json::from_str(text).map_err(|e| MoeError::Json(e.to_string()))?;
        bank.validate()?;
        Ok(bank)
    }
}

fn check_features(features: &[Vec<f64>], map: &RegionMap, bank: &ExpertBank) -> Result<(), MoeError> {
    if features.len() != map.n_patches() {
        return Err(MoeError::DimMismatch(format!(
            "{} patches, map has {}",
            features.len(),
            map.n_patches()
        )));
    }
    if let Some((i, f)) = features.iter().enumerate().find(|(_, f)| f.len() != bank.dim) {
        return Err(MoeError::DimMismatch(format!(
            "patch {i} has dim {}, bank has {}",
            f.len(),
            bank.dim
        )));
    }
    if let Some((patch, &id)) = map
        .region_of
        .iter()
        .enumerate()
        .find(|(_, &id)| id == 0 || id as usize > bank.k_regions())
    {
        return Err(MoeError::UnknownRegionId {
            patch,
            id,
            k: bank.k_regions(),
        });
    }
    Ok(())
}

/// Sends each patch through its region's expert.
pub fn route(features: &[Vec<f64>], map: &RegionMap, bank: &ExpertBank) -> Result<Vec<Vec<f64>>, MoeError> {
    bank.validate()?;
    check_features(features, map, bank)?;
    Ok(features
        .iter()
        .zip(&map.region_of)
        .map(|(x, &id)| bank.experts[id as usize - 1].apply(x))
        .collect())
}

/// Keys for `[cls, patch_1, ..., patch_P]`: patches through their experts, the
/// class token through the shared key or its own expert per `map.cls_policy`.
pub fn moe_key_projection(
    cls: &[f64],
    features: &[Vec<f64>],
    map: &RegionMap,
    bank: &ExpertBank,
) -> Result<Vec<Vec<f64>>, MoeError> {
    if cls.len() != bank.dim {
        return Err(MoeError::DimMismatch(format!(
            "cls has dim {}, bank has {}",
            cls.len(),
            bank.dim
        )));
    }
    let cls_key = match map.cls_policy {
        ClsPolicy::SharedKey => bank.shared_key.apply(cls),
        ClsPolicy::DedicatedExpert => bank
            .cls_expert
            .as_ref()
            .ok_or(MoeError::MissingClsExpert)?
            .apply(cls),
    };
    let mut keys = Vec::with_capacity(features.len() + 1);
    keys.push(cls_key);
    keys.extend(route(features, map, bank)?);
    Ok(keys)
}

/// The baseline: every token through the shared key map.
pub fn shared_key_projection(cls: &[f64], features: &[Vec<f64>], bank: &ExpertBank) -> Vec<Vec<f64>> {
    std::iter::once(cls)
        .chain(features.iter().map(Vec::as_slice))
        .map(|x| bank.shared_key.apply(x))
        .collect()
}

pub const DEFAULT_TOTAL_LAYERS: usize = 12;
pub const DEFAULT_MOE_LAYERS: usize = 6;

/// The last `n_moe` of `total` layer indices.
pub fn layer_selection(total: usize, n_moe: usize) -> Result<Vec<usize>, MoeError> {
    if n_moe > total {
        return Err(MoeError::InvalidCount { n_moe, total });
    }
    Ok((total - n_moe..total).collect())
}
