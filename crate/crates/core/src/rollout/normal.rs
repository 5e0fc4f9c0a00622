//! Per-path random streams: xoshiro256++ generators seeded through SplitMix64,
//! and standard normals by a 1024-layer ziggurat whose edges are computed at
//! first use.
//!
//! Each stream owns a main generator, which supplies exactly one word per
//! normal, and an auxiliary generator for the rare draws that leave the
//! ziggurat's rectangles. The AVX-512 path draws one normal for each of eight
//! streams at once and finishes the rare draws afterwards, so every stream
//! produces the same values on either path.

use std::sync::OnceLock;

/// Streams advanced together by [`NormalGroup`].
pub(crate) const GROUP: usize = 8;

const GOLDEN: u64 = 0x9e37_79b9_7f4a_7c15;
/// Key separating auxiliary streams from main streams.
const AUX_KEY: u64 = 0x6a09_e667_f3bc_c908;
const TWO_POW_M52: f64 = 1.0 / (1u64 << 52) as f64;
const TWO_POW_M53: f64 = 1.0 / (1u64 << 53) as f64;

fn mix64(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub(crate) struct Xoshiro {
    s: [u64; 4],
}

impl Xoshiro {
    pub(crate) fn from_state(s: [u64; 4]) -> Self {
        Self { s }
    }

    /// Stream `index` of `seed`: the state is four SplitMix64 outputs started
    /// from a hash of both.
    pub(crate) fn stream(seed: u64, index: u64) -> Self {
        let mut sm = mix64(mix64(seed).wrapping_add(index));
        let mut s = [0u64; 4];
        for w in &mut s {
            sm = sm.wrapping_add(GOLDEN);
            *w = mix64(sm);
        }
        if s == [0; 4] {
            s[0] = GOLDEN;
        }
        Self { s }
    }

    #[inline(always)]
    pub(crate) fn next_u64(&mut self) -> u64 {
        let s = &mut self.s;
        let out = s[0].wrapping_add(s[3]).rotate_left(23).wrapping_add(s[0]);
        let t = s[1] << 17;
        s[2] ^= s[0];
        s[3] ^= s[1];
        s[1] ^= s[2];
        s[0] ^= s[3];
        s[2] ^= t;
        s[3] = s[3].rotate_left(45);
        out
    }

    /// Uniform on `[0, 1)` with 53 random bits.
    #[inline(always)]
    pub(crate) fn next_f64(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * TWO_POW_M53
    }

    /// Finish a draw whose first word `bits` fell outside the rectangles,
    /// drawing anything further from `self`.
    #[cold]
    fn finish_normal(&mut self, mut bits: u64) -> f64 {
        let z = zig();
        loop {
            let (i, u) = split(bits);
            let x = u * z.x[i];
            if i == 0 {
                return self.tail(u < 0.0);
            }
            let y = z.f[i] + self.next_f64() * (z.f[i + 1] - z.f[i]);
            if y < (-0.5 * x * x).exp() {
                return x;
            }
            bits = self.next_u64();
            if let Some(x) = zig_fast(bits) {
                return x;
            }
        }
    }

    fn tail(&mut self, negative: bool) -> f64 {
        let r = zig().r;
        loop {
            let x = -(1.0 - self.next_f64()).ln() / r;
            let y = -(1.0 - self.next_f64()).ln();
            if 2.0 * y >= x * x {
                let v = r + x;
                return if negative { -v } else { v };
            }
        }
    }
}

/// A stream of standard normals.
#[derive(Debug, Clone, PartialEq, Eq)]
pub(crate) struct NormalStream {
    main: Xoshiro,
    aux: Xoshiro,
}

impl NormalStream {
    pub(crate) fn new(seed: u64, index: u64) -> Self {
        Self {
            main: Xoshiro::stream(seed, index),
            aux: Xoshiro::stream(seed ^ AUX_KEY, index),
        }
    }

    pub(crate) fn normal(&mut self) -> f64 {
        let bits = self.main.next_u64();
        match zig_fast(bits) {
            Some(x) => x,
            None => self.aux.finish_normal(bits),
        }
    }

    /// Uniform on `[0, 1)` from the main generator.
    pub(crate) fn uniform(&mut self) -> f64 {
        self.main.next_f64()
    }
}

const ZIG_LAYERS: usize = 1024;
const LAYER_MASK: u64 = ZIG_LAYERS as u64 - 1;

fn pdf(x: f64) -> f64 {
    (-0.5 * x * x).exp()
}

/// `∫_r^∞ exp(-t^2 / 2) dt` by composite Simpson over `[r, r + 12]`.
fn tail_area(r: f64) -> f64 {
    let n = 4096;
    let h = 12.0 / n as f64;
    let inner: f64 = (1..n).map(|k| if k % 2 == 1 { 4.0 } else { 2.0 } * pdf(r + k as f64 * h)).sum();
    (pdf(r) + inner + pdf(r + 12.0)) * h / 3.0
}

/// Layer edges `x[0] > x[1] = R > ... > x[N] = 0` and `f[i] = exp(-x[i]^2 / 2)`.
/// Every layer, and the base layer with its tail beyond `R`, has the same area.
/// `x[0]` is the width of the base layer's rectangle of that area.
pub(crate) struct Ziggurat {
    pub(crate) r: f64,
    pub(crate) x: [f64; ZIG_LAYERS + 1],
    pub(crate) f: [f64; ZIG_LAYERS + 1],
}

/// Edges `x[0..n]` of an `n`-layer ziggurat with base edge `r`, and the layer
/// area. `None` when the layers reach the mode early.
fn edges(n: usize, r: f64) -> Option<(f64, Vec<f64>)> {
    let v = r * pdf(r) + tail_area(r);
    let mut x = vec![0.0; n + 1];
    x[0] = v / pdf(r);
    x[1] = r;
    for i in 1..n - 1 {
        let level = v / x[i] + pdf(x[i]);
        if level >= 1.0 {
            return None;
        }
        x[i + 1] = (-2.0 * level.ln()).sqrt();
    }
    Some((v, x))
}

/// Base edge `R` of an `n`-layer ziggurat: bisect until the top layer also
/// has area `v`.
fn base_edge(n: usize) -> f64 {
    let (mut lo, mut hi) = (2.0, 6.0);
    for _ in 0..100 {
        let mid = 0.5 * (lo + hi);
        if mid <= lo || mid >= hi {
            break;
        }
        match edges(n, mid) {
            Some((v, x)) if x[n - 1] * (1.0 - pdf(x[n - 1])) > v => hi = mid,
            _ => lo = mid,
        }
    }
    hi
}

impl Ziggurat {
    fn build() -> Self {
        let r = base_edge(ZIG_LAYERS);
        let (_, edges) = edges(ZIG_LAYERS, r).expect("upper bracket keeps all layers");
        let mut x = [0.0; ZIG_LAYERS + 1];
        x[..ZIG_LAYERS].copy_from_slice(&edges[..ZIG_LAYERS]);
        let f = x.map(pdf);
        Self { r, x, f }
    }
}

pub(crate) fn zig() -> &'static Ziggurat {
    static TABLE: OnceLock<Ziggurat> = OnceLock::new();
    TABLE.get_or_init(Ziggurat::build)
}

/// Layer index from the low bits, signed uniform on `[-1, 1)` from the top 53 bits.
#[inline(always)]
fn split(bits: u64) -> (usize, f64) {
    ((bits & LAYER_MASK) as usize, (bits >> 11) as f64 * TWO_POW_M52 - 1.0)
}

#[inline(always)]
fn zig_fast(bits: u64) -> Option<f64> {
    let z = zig();
    let (i, u) = split(bits);
    let x = u * z.x[i];
    (x.abs() < z.x[i + 1]).then_some(x)
}

/// Eight streams; main generators stored lane by lane.
#[derive(Debug, Clone, PartialEq, Eq)]
pub(crate) struct NormalGroup {
    s: [[u64; GROUP]; 4],
    aux: [Xoshiro; GROUP],
}

impl NormalGroup {
    /// Streams `first .. first + GROUP` of `seed`.
    pub(crate) fn new(seed: u64, first: u64) -> Self {
        let streams: [NormalStream; GROUP] = std::array::from_fn(|l| NormalStream::new(seed, first + l as u64));
        let s = std::array::from_fn(|k| std::array::from_fn(|l| streams[l].main.s[k]));
        Self {
            s,
            aux: streams.map(|st| st.aux),
        }
    }

    /// One normal per stream into `row[col .. col + GROUP]` for each row.
    pub(crate) fn fill_scalar<const W: usize>(&mut self, rows: &mut [[f64; W]], col: usize) {
        for l in 0..GROUP {
            let mut st = NormalStream {
                main: Xoshiro::from_state(std::array::from_fn(|k| self.s[k][l])),
                aux: self.aux[l].clone(),
            };
            for row in rows.iter_mut() {
                row[col + l] = st.normal();
            }
            for k in 0..4 {
                self.s[k][l] = st.main.s[k];
            }
            self.aux[l] = st.aux;
        }
    }

    /// Same values as [`Self::fill_scalar`].
    ///
    /// # Safety
    /// The CPU must support AVX-512F and AVX-512DQ.
    #[cfg(target_arch = "x86_64")]
    #[target_feature(enable = "avx512f,avx512dq")]
    pub(crate) unsafe fn fill_avx512<const W: usize>(&mut self, rows: &mut [[f64; W]], col: usize) {
        use std::arch::x86_64::*;
        assert!(col + GROUP <= W);
        let xt = zig().x.as_ptr();
        let scale = _mm512_set1_pd(TWO_POW_M52);
        let one = _mm512_set1_pd(1.0);
        let low = _mm512_set1_epi64(LAYER_MASK as i64);
        let [mut s0, mut s1, mut s2, mut s3] = self.s.map(|w| _mm512_loadu_si512(w.as_ptr() as *const __m512i));
        // Lanes outside the rectangles keep their raw word until the batch ends.
        let mut pending = [0u8; 64];
        for batch in rows.chunks_mut(pending.len()) {
            for (row, miss) in batch.iter_mut().zip(pending.iter_mut()) {
                let bits = _mm512_add_epi64(_mm512_rol_epi64::<23>(_mm512_add_epi64(s0, s3)), s0);
                let t = _mm512_slli_epi64::<17>(s1);
                s2 = _mm512_xor_si512(s2, s0);
                s3 = _mm512_xor_si512(s3, s1);
                s1 = _mm512_xor_si512(s1, s2);
                s0 = _mm512_xor_si512(s0, s3);
                s2 = _mm512_xor_si512(s2, t);
                s3 = _mm512_rol_epi64::<45>(s3);

                let idx = _mm512_and_si512(bits, low);
                let u = _mm512_sub_pd(_mm512_mul_pd(_mm512_cvtepu64_pd(_mm512_srli_epi64::<11>(bits)), scale), one);
                let x = _mm512_mul_pd(u, _mm512_i64gather_pd::<8>(idx, xt));
                let edge = _mm512_i64gather_pd::<8>(idx, xt.add(1));
                let inside = _mm512_cmp_pd_mask::<_CMP_LT_OQ>(_mm512_abs_pd(x), edge);
                let out = _mm512_mask_blend_pd(inside, _mm512_castsi512_pd(bits), x);
                _mm512_storeu_pd(row.as_mut_ptr().add(col), out);
                *miss = !inside;
            }
            for (row, miss) in batch.iter_mut().zip(pending.iter()) {
                let mut m = *miss;
                while m != 0 {
                    let l = m.trailing_zeros() as usize;
                    m &= m - 1;
                    let slot = &mut row[col + l];
                    *slot = self.aux[l].finish_normal(slot.to_bits());
                }
            }
        }
        for (k, v) in [s0, s1, s2, s3].into_iter().enumerate() {
            _mm512_storeu_si512(self.s[k].as_mut_ptr() as *mut __m512i, v);
        }
    }
}

/// Whether [`NormalGroup::fill_avx512`] can run here.
pub(crate) fn has_avx512() -> bool {
    #[cfg(target_arch = "x86_64")]
    {
        std::is_x86_feature_detected!("avx512f") && std::is_x86_feature_detected!("avx512dq")
    }
    #[cfg(not(target_arch = "x86_64"))]
    {
        false
    }
}
