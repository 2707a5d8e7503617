use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Partition of a domain into equal axis-aligned regions. Regions are indexed
/// in row-major order over the region grid.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RegionLayout {
    pub domain: [usize; 3],
    pub region: [usize; 3],
    pub token_spacing: usize,
}

impl RegionLayout {
    pub fn new(domain: [usize; 3], region: [usize; 3], token_spacing: usize) -> Result<Self> {
        for a in 0..3 {
            if region[a] == 0 || domain[a] % region[a] != 0 {
                return Err(Error::Config(format!(
                    "domain {:?} is not tiled by regions {:?}",
                    domain, region
                )));
            }
            if token_spacing == 0 || region[a] % token_spacing != 0 {
                return Err(Error::Config(format!(
                    "region {:?} must be a multiple of the token spacing {}",
                    region, token_spacing
                )));
            }
        }
        Ok(RegionLayout {
            domain,
            region,
            token_spacing,
        })
    }

    /// Regions per axis.
    pub fn regions(&self) -> [usize; 3] {
        std::array::from_fn(|a| self.domain[a] / self.region[a])
    }

    pub fn count(&self) -> usize {
        self.regions().iter().product()
    }

    /// Tokens per axis inside one region.
    pub fn region_tokens(&self) -> [usize; 3] {
        self.region.map(|r| r / self.token_spacing)
    }

    pub fn tokens_per_region(&self) -> usize {
        self.region_tokens().iter().product()
    }

    pub fn region_coord(&self, r: usize) -> [usize; 3] {
        let [_, ny, nz] = self.regions();
        [r / (ny * nz), (r / nz) % ny, r % nz]
    }

    /// Voxel offset of region `r`.
    pub fn region_offset(&self, r: usize) -> [usize; 3] {
        let c = self.region_coord(r);
        std::array::from_fn(|a| c[a] * self.region[a])
    }

    /// Global token-grid coordinate of local token `t` of region `r`.
    pub fn token_coord(&self, r: usize, t: usize) -> [usize; 3] {
        let rt = self.region_tokens();
        let c = self.region_coord(r);
        let local = [t / (rt[1] * rt[2]), (t / rt[2]) % rt[1], t % rt[2]];
        std::array::from_fn(|a| c[a] * rt[a] + local[a])
    }
}
