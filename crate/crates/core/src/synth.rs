//! Synthetic multi-channel Z-stacks with exact instance masks.
//!
//! Each dose changes the cells themselves (nucleus size, nucleus/cytoplasm
//! brightness ratio). Each site adds a faint smooth background pattern that is
//! shared by every dose. With `confound_strength > 0` a second background
//! texture keyed by the dose is blended in: a label-correlated grating that
//! lives entirely outside the cells.

use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::manifest::{check_well_splits, Split};
use crate::tbf;
use crate::tensor::{idx3, Tensor};
use crate::volume::{extract_crops, CellCrop, SegmentationMask, StackMeta, ZStack};

/// Peak intensity of the brightest cell structure; confounder amplitudes are
/// expressed relative to it.
pub const CELL_PEAK: f64 = 1.0;
/// Dose-texture amplitude at `confound_strength = 1`.
pub const CONFOUND_AMPLITUDE: f64 = 0.1;
const SITE_AMPLITUDE: f64 = 0.03;
const BACKGROUND_LEVEL: f64 = 0.05;
const NOISE_SD: f64 = 0.02;
const PLACEMENT_RETRIES: usize = 20_000;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    pub n_doses: usize,
    pub wells_per_dose: usize,
    pub sites_per_well: usize,
    pub cells_per_site: usize,
    pub channels: usize,
    /// Stack extents `[X, Y, Z]` in voxels.
    pub volume: [usize; 3],
    /// Mean cell radius in the xy plane, voxels.
    pub cell_radius: f64,
    pub confound_strength: f64,
    pub neighbor_density: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            n_doses: 6,
            wells_per_dose: 2,
            sites_per_well: 4,
            cells_per_site: 18,
            channels: 3,
            volume: [192, 192, 16],
            cell_radius: 13.0,
            confound_strength: 0.0,
            neighbor_density: 0.5,
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_doses < 2 {
            return Err(Error::invalid("need at least two doses"));
        }
        if self.wells_per_dose < 2 {
            return Err(Error::invalid("leave-wells-out splits need at least two wells per dose"));
        }
        if self.wells_per_dose == 2 && self.sites_per_well < 2 {
            return Err(Error::invalid(
                "with two wells per dose the held-out well needs two sites (val and test)",
            ));
        }
        if self.sites_per_well == 0 || self.cells_per_site == 0 || self.channels == 0 {
            return Err(Error::invalid("counts must be at least 1"));
        }
        if self.volume.iter().any(|&v| v == 0) {
            return Err(Error::invalid("volume extents must be positive"));
        }
        if !(0.0..=1.0).contains(&self.confound_strength) {
            return Err(Error::invalid("confound_strength must lie in [0, 1]"));
        }
        if !(0.0..=1.0).contains(&self.neighbor_density) {
            return Err(Error::invalid("neighbor_density must lie in [0, 1]"));
        }
        if !(self.cell_radius > 1.0) {
            return Err(Error::invalid("cell_radius must exceed 1 voxel"));
        }
        Ok(())
    }

    pub fn n_stacks(&self) -> usize {
        self.n_doses * self.wells_per_dose * self.sites_per_well
    }
}

pub fn channel_names(channels: usize) -> Vec<String> {
    (0..channels)
        .map(|c| match c {
            0 => "nucleus".to_string(),
            1 => "cytoplasm".to_string(),
            2 => "organelle".to_string(),
            n => format!("channel{n}"),
        })
        .collect()
}

/// Well name: one plate row per dose, one column per replicate (`A01`, `A02`, `B01`, ...).
pub fn well_name(dose: usize, replicate: usize) -> String {
    let row = (b'A' + (dose % 26) as u8) as char;
    format!("{row}{:02}", replicate + 1)
}

/// Leave-wells-out assignment. The last well of each dose is held out (with
/// two wells its sites are halved between val and test); with three or more
/// wells the last two are val and test.
pub fn assign_split(cfg: &SynthConfig, replicate: usize, site: usize) -> Split {
    let w = cfg.wells_per_dose;
    if w >= 3 {
        if replicate == w - 1 {
            Split::Test
        } else if replicate == w - 2 {
            Split::Val
        } else {
            Split::Train
        }
    } else if replicate == 0 {
        Split::Train
    } else if site < cfg.sites_per_well / 2 {
        Split::Val
    } else {
        Split::Test
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthStack {
    pub meta: StackMeta,
    pub split: Split,
    pub stack: ZStack,
    pub mask: SegmentationMask,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthDataset {
    pub config: SynthConfig,
    pub stacks: Vec<SynthStack>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StackRecord {
    pub stack_id: String,
    pub stack: PathBuf,
    pub mask: PathBuf,
    pub label: usize,
    pub well: String,
    pub site: u32,
    pub split: Split,
}

/// Stack-level manifest written next to the generated stacks.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StackManifest {
    pub channels: Vec<String>,
    pub spacing: [f64; 3],
    pub stacks: Vec<StackRecord>,
}

impl StackManifest {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let m: Self = serde_json::from_str(&text)?;
        check_well_splits(m.stacks.iter().map(|s| (s.well.as_str(), s.site, s.split)))?;
        Ok(m)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut text = serde_json::to_string_pretty(self)?;
        text.push('\n');
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }
}

#[derive(Debug, Clone, Copy)]
struct Cell {
    center: [f64; 3],
    radii: [f64; 3],
    angle: f64,
    nucleus_offset: [f64; 2],
    nucleus_scale: f64,
}

impl Cell {
    /// Normalized ellipsoid radius of a voxel relative to this cell's body,
    /// optionally scaled down to the nucleus.
    fn radius_at(&self, p: [f64; 3], scale: f64, offset: [f64; 2]) -> f64 {
        let dx = p[0] - self.center[0] - offset[0];
        let dy = p[1] - self.center[1] - offset[1];
        let dz = p[2] - self.center[2];
        let (s, c) = self.angle.sin_cos();
        let u = (c * dx + s * dy) / (self.radii[0] * scale);
        let v = (-s * dx + c * dy) / (self.radii[1] * scale);
        let w = dz / (self.radii[2] * if scale < 1.0 { 0.6 } else { 1.0 });
        (u * u + v * v + w * w).sqrt()
    }

    fn reach(&self) -> f64 {
        self.radii[0].max(self.radii[1])
    }
}

/// Per-dose morphology: nucleus radius as a fraction of the cell radius and
/// the nucleus/cytoplasm brightness ratio.
pub fn dose_morphology(dose: usize, n_doses: usize) -> (f64, f64) {
    let t = dose as f64 / (n_doses - 1).max(1) as f64;
    (0.25 + 0.5 * t, 1.2 + 1.8 * t)
}

/// Three plane waves with phases and orientations fixed by `key`.
#[derive(Debug, Clone)]
struct Pattern {
    waves: [(f64, f64, f64); 3],
}

impl Pattern {
    fn new(key: u64, wavelengths: [f64; 3], base_angle: f64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(key);
        let mut waves = [(0.0, 0.0, 0.0); 3];
        for (i, w) in waves.iter_mut().enumerate() {
            let angle = base_angle + i as f64 * PI / 3.0 + rng.random_range(-0.1..0.1);
            let k = 2.0 * PI / wavelengths[i];
            *w = (k * angle.cos(), k * angle.sin(), rng.random_range(0.0..2.0 * PI));
        }
        Self { waves }
    }

    /// In `[-1, 1]`.
    fn at(&self, x: f64, y: f64) -> f64 {
        self.waves.iter().map(|&(kx, ky, ph)| (kx * x + ky * y + ph).sin()).sum::<f64>() / 3.0
    }
}

fn site_pattern(site: usize) -> Pattern {
    Pattern::new(0x5172_0000 + site as u64, [61.0, 47.0, 83.0], site as f64 * 0.7)
}

/// Dose-keyed background signature: a smooth non-negative wave whose
/// per-channel gains identify the dose.
#[derive(Debug, Clone)]
struct DoseTexture {
    gains: Vec<f64>,
    k: [f64; 2],
}

/// Channel gain patterns cycled over doses.
const DOSE_GAINS: [[f64; 3]; 6] = [
    [1.0, 0.0, 0.0],
    [0.0, 1.0, 0.0],
    [0.0, 0.0, 1.0],
    [1.0, 1.0, 0.0],
    [0.0, 1.0, 1.0],
    [1.0, 0.0, 1.0],
];

impl DoseTexture {
    /// In `[0, 1]`.
    fn at(&self, x: f64, y: f64) -> f64 {
        0.7 + 0.3 * (self.k[0] * x + self.k[1] * y).sin()
    }
}

fn dose_pattern(dose: usize, n_doses: usize, channels: usize) -> DoseTexture {
    let angle = dose as f64 * PI / n_doses as f64;
    let k = 2.0 * PI / 16.0;
    let row = DOSE_GAINS[dose % DOSE_GAINS.len()];
    let gains = (0..channels).map(|c| row[c % 3]).collect();
    DoseTexture { gains, k: [k * angle.cos(), k * angle.sin()] }
}

fn place_cells(cfg: &SynthConfig, rng: &mut ChaCha8Rng) -> Result<Vec<Cell>> {
    let [nx, ny, nz] = cfg.volume;
    let gap = 1.0 + 8.0 * (1.0 - cfg.neighbor_density);
    let mut cells: Vec<Cell> = Vec::with_capacity(cfg.cells_per_site);
    for _ in 0..cfg.cells_per_site {
        let mut placed = false;
        for _ in 0..PLACEMENT_RETRIES {
            let r = cfg.cell_radius * rng.random_range(0.9..1.1);
            let aspect = rng.random_range(0.85..1.15);
            let radii = [r * aspect, r / aspect, nz as f64 * 0.75];
            let center = [
                rng.random_range(2.0..(nx as f64 - 2.0).max(2.5)),
                rng.random_range(2.0..(ny as f64 - 2.0).max(2.5)),
                (nz as f64 - 1.0) / 2.0 + rng.random_range(-0.5..0.5),
            ];
            let angle = rng.random_range(0.0..PI);
            let cand = Cell {
                center,
                radii,
                angle,
                nucleus_offset: [rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)],
                nucleus_scale: rng.random_range(0.95..1.05),
            };
            let clear = cells.iter().all(|o| {
                let d = ((o.center[0] - center[0]).powi(2) + (o.center[1] - center[1]).powi(2)).sqrt();
                d >= o.reach() + cand.reach() + gap
            });
            if clear {
                cells.push(cand);
                placed = true;
                break;
            }
        }
        if !placed {
            return Err(Error::invalid(format!(
                "could not place {} non-overlapping cells in a {}×{} field; lower cells_per_site or neighbor spacing",
                cfg.cells_per_site, nx, ny
            )));
        }
    }
    Ok(cells)
}

fn render_stack(
    cfg: &SynthConfig,
    dose: usize,
    site: usize,
    rng: &mut ChaCha8Rng,
) -> Result<(Tensor<f32>, SegmentationMask)> {
    let dims = cfg.volume;
    let [nx, ny, nz] = dims;
    let n = nx * ny * nz;
    let channels = cfg.channels;
    let cells = place_cells(cfg, rng)?;

    let (nuc_frac, ratio) = dose_morphology(dose, cfg.n_doses);
    let nuc_amp = CELL_PEAK;
    let cyto_amp = CELL_PEAK / ratio;

    let mut img = vec![0f64; channels * n];
    let mut labels = vec![0u32; n];

    let site_pat = site_pattern(site);
    let dose_pat = dose_pattern(dose, cfg.n_doses, channels);
    let confound = cfg.confound_strength * CONFOUND_AMPLITUDE;
    for x in 0..nx {
        for y in 0..ny {
            let bg = BACKGROUND_LEVEL + SITE_AMPLITUDE * site_pat.at(x as f64, y as f64);
            for z in 0..nz {
                let i = idx3(dims, x, y, z);
                for c in 0..channels {
                    img[c * n + i] = bg;
                }
            }
        }
    }

    for (k, cell) in cells.iter().enumerate() {
        let id = k as u32 + 1;
        let reach = cell.reach().ceil() as isize + 1;
        let (cx, cy) = (cell.center[0].round() as isize, cell.center[1].round() as isize);
        let spots: Vec<[f64; 3]> = (0..rng.random_range(3..9))
            .map(|_| {
                let a = rng.random_range(0.0..2.0 * PI);
                let rr = cell.reach() * rng.random_range(0.55..0.85);
                [
                    cell.center[0] + rr * a.cos(),
                    cell.center[1] + rr * a.sin(),
                    rng.random_range(0.0..nz as f64),
                ]
            })
            .collect();
        let nuc_scale = nuc_frac * cell.nucleus_scale;
        for x in (cx - reach).max(0)..(cx + reach + 1).min(nx as isize) {
            for y in (cy - reach).max(0)..(cy + reach + 1).min(ny as isize) {
                for z in 0..nz {
                    let p = [x as f64, y as f64, z as f64];
                    let d = cell.radius_at(p, 1.0, [0.0, 0.0]);
                    if d > 1.0 {
                        continue;
                    }
                    let i = idx3(dims, x as usize, y as usize, z);
                    labels[i] = id;
                    let dn = cell.radius_at(p, nuc_scale, cell.nucleus_offset);
                    let in_nucleus = dn <= 1.0;
                    if in_nucleus {
                        img[i] += nuc_amp * (-0.7 * dn * dn).exp();
                    }
                    let cyto = cyto_amp * (-1.2 * d * d).exp() * if in_nucleus { 0.25 } else { 1.0 };
                    if channels > 1 {
                        img[n + i] += cyto;
                        for c in 3..channels {
                            img[c * n + i] += 0.5 * cyto;
                        }
                    }
                    if channels > 2 {
                        let org: f64 = spots
                            .iter()
                            .map(|s| {
                                let r2 = (p[0] - s[0]).powi(2) + (p[1] - s[1]).powi(2) + (p[2] - s[2]).powi(2);
                                (-r2 / (2.0 * 1.5 * 1.5)).exp()
                            })
                            .sum();
                        img[2 * n + i] += 0.8 * CELL_PEAK * org.min(1.0) + 0.1 * cyto;
                    }
                }
            }
        }
    }

    // the dose texture lives only where no cell is
    if confound > 0.0 {
        for x in 0..nx {
            for y in 0..ny {
                let v = confound * dose_pat.at(x as f64, y as f64);
                for z in 0..nz {
                    let i = idx3(dims, x, y, z);
                    if labels[i] == 0 {
                        for (c, g) in dose_pat.gains.iter().enumerate() {
                            img[c * n + i] += g * v;
                        }
                    }
                }
            }
        }
    }

    let noise = Normal::new(0.0, NOISE_SD).expect("valid sd");
    let data: Vec<f32> = img.into_iter().map(|v| (v + noise.sample(rng)).max(0.0) as f32).collect();
    Ok((
        Tensor::from_parts(vec![channels, nx, ny, nz], data),
        SegmentationMask { dims, labels },
    ))
}

/// One stack of the plate. Gives the same stack [`generate`] would for
/// `(dose, replicate, site)`.
pub fn generate_stack(cfg: &SynthConfig, dose: usize, replicate: usize, site: usize) -> Result<SynthStack> {
    if dose >= cfg.n_doses || replicate >= cfg.wells_per_dose || site >= cfg.sites_per_well {
        return Err(Error::invalid(format!("no stack at dose {dose}, well {replicate}, site {site}")));
    }
    let idx = (dose * cfg.wells_per_dose + replicate) * cfg.sites_per_well + site;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(idx as u64);
    let (image, mask) = render_stack(cfg, dose, site, &mut rng)?;
    let well = well_name(dose, replicate);
    let site_id = site as u32 + 1;
    Ok(SynthStack {
        meta: StackMeta {
            stack_id: format!("{well}_s{site_id}"),
            label: dose,
            well,
            site: site_id,
        },
        split: assign_split(cfg, replicate, site),
        stack: ZStack::new(image, channel_names(cfg.channels), [0.65, 0.65, 2.0])?,
        mask,
    })
}

/// Renders every (dose, well, site) stack. A pure function of the config.
pub fn generate(cfg: &SynthConfig) -> Result<SynthDataset> {
    cfg.validate()?;
    let mut jobs = Vec::with_capacity(cfg.n_stacks());
    for dose in 0..cfg.n_doses {
        for rep in 0..cfg.wells_per_dose {
            for site in 0..cfg.sites_per_well {
                jobs.push((dose, rep, site));
            }
        }
    }
    let build = |&(dose, rep, site): &(usize, usize, usize)| generate_stack(cfg, dose, rep, site);
    #[cfg(feature = "parallel")]
    let stacks = {
        use rayon::prelude::*;
        jobs.par_iter().map(build).collect::<Result<Vec<_>>>()?
    };
    #[cfg(not(feature = "parallel"))]
    let stacks = jobs.iter().map(build).collect::<Result<Vec<_>>>()?;
    Ok(SynthDataset { config: cfg.clone(), stacks })
}

impl SynthDataset {
    /// Writes `stacks/<id>.tbf`, `masks/<id>.tbf` and `stacks/manifest.json`.
    pub fn write(&self, out: &Path) -> Result<StackManifest> {
        let mut records = Vec::with_capacity(self.stacks.len());
        for s in &self.stacks {
            let stack_rel = PathBuf::from(format!("{}.tbf", s.meta.stack_id));
            let mask_rel = PathBuf::from("..").join("masks").join(format!("{}.tbf", s.meta.stack_id));
            tbf::write_f32(&out.join("stacks").join(&stack_rel), &s.stack.image)?;
            tbf::write_f32(&out.join("masks").join(format!("{}.tbf", s.meta.stack_id)), &s.mask.to_tensor())?;
            records.push(StackRecord {
                stack_id: s.meta.stack_id.clone(),
                stack: stack_rel,
                mask: mask_rel,
                label: s.meta.label,
                well: s.meta.well.clone(),
                site: s.meta.site,
                split: s.split,
            });
        }
        let manifest = StackManifest {
            channels: channel_names(self.config.channels),
            spacing: [0.65, 0.65, 2.0],
            stacks: records,
        };
        manifest.save(&out.join("stacks").join("manifest.json"))?;
        Ok(manifest)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SiteCount {
    pub dose: usize,
    pub well: String,
    pub site: u32,
    pub split: Split,
    /// Instances rendered in the stack.
    pub placed: usize,
    /// Instances that survive crop extraction.
    pub cells: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetSummary {
    pub sites: Vec<SiteCount>,
}

impl DatasetSummary {
    pub fn total_cells(&self) -> usize {
        self.sites.iter().map(|s| s.cells).sum()
    }

    /// `(dose, wells, cells)` rows, one per dose.
    pub fn per_dose(&self) -> Vec<(usize, usize, usize)> {
        let mut rows: BTreeMap<usize, (std::collections::BTreeSet<&str>, usize)> = BTreeMap::new();
        for s in &self.sites {
            let e = rows.entry(s.dose).or_default();
            e.0.insert(&s.well);
            e.1 += s.cells;
        }
        rows.into_iter().map(|(d, (w, c))| (d, w.len(), c)).collect()
    }

    pub fn to_table(&self) -> String {
        let mut out = String::from("| dose | wells | cells |\n|---:|---:|---:|\n");
        for (d, w, c) in self.per_dose() {
            out.push_str(&format!("| {d} | {w} | {c} |\n"));
        }
        out.push_str(&format!("| total | | {} |\n", self.total_cells()));
        out
    }
}

/// Crops from every stack, tagged with the stack's split, in stack order.
pub fn dataset_crops(ds: &SynthDataset, crop_xy: usize, min_voxels: usize) -> Result<Vec<(Split, CellCrop)>> {
    let mut out = Vec::new();
    for s in &ds.stacks {
        let ex = extract_crops(&s.stack, &s.mask, &s.meta, crop_xy, min_voxels)?;
        out.extend(ex.crops.into_iter().map(|c| (s.split, c)));
    }
    Ok(out)
}

/// Per-site cell counts after crop extraction with the given settings.
pub fn describe(ds: &SynthDataset, crop_xy: usize, min_voxels: usize) -> Result<DatasetSummary> {
    let sites = ds
        .stacks
        .iter()
        .map(|s| {
            let ex = extract_crops(&s.stack, &s.mask, &s.meta, crop_xy, min_voxels)?;
            Ok(SiteCount {
                dose: s.meta.label,
                well: s.meta.well.clone(),
                site: s.meta.site,
                split: s.split,
                placed: ex.crops.len() + ex.dropped_boundary.len() + ex.dropped_small.len(),
                cells: ex.crops.len(),
            })
        })
        .collect::<Result<_>>()?;
    Ok(DatasetSummary { sites })
}
