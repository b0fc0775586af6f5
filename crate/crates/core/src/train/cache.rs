//! Pre-extracted latents and masks for training.

use std::path::Path;

use crate::codec::{encode, LatentGrid, PatchBasis};
use crate::error::{Error, Result};
use crate::mask_align::{latent_mask, LatentMask};
use crate::media_io::{load_clip, Archive, MaskStack, TensorEntry, Video};
use crate::par;

/// One training pair with the facial masks of its HQ clip.
#[derive(Debug, Clone)]
pub struct ClipPair {
    pub id: String,
    pub lq: Video,
    pub hq: Video,
    pub masks: MaskStack,
}

/// Cached tensors of a single clip.
#[derive(Debug, Clone, PartialEq)]
pub struct CachedClip {
    pub id: String,
    pub z_l: LatentGrid,
    pub z_h: LatentGrid,
    pub latent_mask: LatentMask,
    pub pixel_mask: MaskStack,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct LatentCache {
    pub clips: Vec<CachedClip>,
}

impl LatentCache {
    pub fn len(&self) -> usize {
        self.clips.len()
    }

    pub fn is_empty(&self) -> bool {
        self.clips.is_empty()
    }

    pub fn get(&self, id: &str) -> Option<&CachedClip> {
        self.clips.iter().find(|c| c.id == id)
    }

    /// Cache restricted to `ids`, in the given order.
    pub fn subset(&self, ids: &[String]) -> Result<LatentCache> {
        let clips = ids
            .iter()
            .map(|id| {
                self.get(id)
                    .cloned()
                    .ok_or_else(|| Error::Validation(format!("clip {id:?} is not in the cache")))
            })
            .collect::<Result<_>>()?;
        Ok(LatentCache { clips })
    }

    /// Entries `zl/<id>`, `zh/<id>`, `Ml/<id>`, `Mp/<id>`.
    pub fn to_archive(&self) -> Archive {
        let mut a = Archive::new();
        for c in &self.clips {
            let shape = c.z_l.shape().to_vec();
            a.push(TensorEntry::from_f64(format!("zl/{}", c.id), shape.clone(), c.z_l.data()));
            a.push(TensorEntry::from_f64(format!("zh/{}", c.id), shape.clone(), c.z_h.data()));
            a.push(TensorEntry::from_f64(format!("Ml/{}", c.id), shape, c.latent_mask.data()));
            let (f, h, w) = c.pixel_mask.dims();
            a.push(TensorEntry::new(
                format!("Mp/{}", c.id),
                vec![f, h, w],
                c.pixel_mask.data().iter().map(|&m| m as f32).collect(),
            ));
        }
        a
    }

    pub fn from_archive(archive: &Archive) -> Result<Self> {
        let latent = |e: &TensorEntry| -> Result<LatentGrid> {
            match e.dims.as_slice() {
                &[16, t, h, w] => LatentGrid::from_data(t, h, w, e.to_f64()),
                d => Err(Error::Validation(format!("entry {} has non-latent dims {d:?}", e.name))),
            }
        };
        let mut clips = Vec::new();
        for name in archive.names() {
            let Some(id) = name.strip_prefix("zl/") else { continue };
            let z_l = latent(archive.require(name)?)?;
            let z_h = latent(archive.require(&format!("zh/{id}"))?)?;
            let latent_mask = LatentMask::from_grid(latent(archive.require(&format!("Ml/{id}"))?)?)?;
            let mp = archive.require(&format!("Mp/{id}"))?;
            let pixel_mask = match mp.dims.as_slice() {
                &[f, h, w] => MaskStack::new(f, h, w, mp.data.iter().map(|&v| (v > 0.5) as u8).collect())?,
                d => return Err(Error::Validation(format!("entry {} has non-mask dims {d:?}", mp.name))),
            };
            clips.push(CachedClip {
                id: id.to_string(),
                z_l,
                z_h,
                latent_mask,
                pixel_mask,
            });
        }
        Ok(Self { clips })
    }
}

/// Encodes each pair once and aligns its masks.
pub fn cache_latents(pairs: &[ClipPair], basis: &PatchBasis) -> Result<LatentCache> {
    let clips = par::map_slice(pairs, |p| -> Result<CachedClip> {
        p.lq.same_shape(&p.hq)?;
        if p.masks.dims() != p.hq.dims() {
            return Err(Error::Shape(format!("clip {}: masks do not match frames", p.id)));
        }
        Ok(CachedClip {
            id: p.id.clone(),
            z_l: encode(&p.lq, basis)?,
            z_h: encode(&p.hq, basis)?,
            latent_mask: latent_mask(&p.masks)?,
            pixel_mask: p.masks.clone(),
        })
    });
    Ok(LatentCache {
        clips: clips.into_iter().collect::<Result<_>>()?,
    })
}

/// Loads `<root>/hq/<id>/{frames,masks}` and `<root>/lq/<id>/frames` for every
/// HQ clip id, in sorted order.
pub fn load_pairs(root: impl AsRef<Path>) -> Result<Vec<ClipPair>> {
    let root = root.as_ref();
    let hq_dir = root.join("hq");
    let mut ids: Vec<String> = std::fs::read_dir(&hq_dir)
        .map_err(|e| Error::io(&hq_dir, e))?
        .filter_map(|e| e.ok())
        .filter(|e| e.path().is_dir())
        .map(|e| e.file_name().to_string_lossy().into_owned())
        .collect();
    ids.sort();
    ids.iter()
        .map(|id| {
            let (hq, masks) = load_clip(hq_dir.join(id))?;
            let masks = masks.ok_or_else(|| Error::Validation(format!("clip {id:?} has no masks")))?;
            let lq_root = root.join("lq").join(id);
            if !lq_root.is_dir() {
                return Err(Error::Validation(format!("clip {id:?} has no low-quality pair")));
            }
            let (lq, _) = load_clip(lq_root)?;
            Ok(ClipPair {
                id: id.clone(),
                lq,
                hq,
                masks,
            })
        })
        .collect()
}
