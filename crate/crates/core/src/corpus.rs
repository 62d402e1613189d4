//! Procedural "paintings": five texture families rendered in named
//! two-colour palettes, with captions from a tiny grammar.
//!
//! Caption grammar: `a <scale> painting of <family> in <palette>`.

use std::fmt;
use std::str::FromStr;

use rand::Rng;

use crate::codec::PixelImage;
use crate::error::{Error, Result};
use crate::rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Family {
    Stripes,
    Dots,
    Checker,
    Gradient,
    NoiseField,
}

impl Family {
    pub const ALL: [Family; 5] = [
        Family::Stripes,
        Family::Dots,
        Family::Checker,
        Family::Gradient,
        Family::NoiseField,
    ];

    /// Caption word.
    pub fn word(self) -> &'static str {
        match self {
            Family::Stripes => "stripes",
            Family::Dots => "dots",
            Family::Checker => "checker",
            Family::Gradient => "gradient",
            Family::NoiseField => "noise",
        }
    }
}

impl FromStr for Family {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "stripes" => Ok(Family::Stripes),
            "dots" => Ok(Family::Dots),
            "checker" => Ok(Family::Checker),
            "gradient" => Ok(Family::Gradient),
            "noise" | "noise-field" => Ok(Family::NoiseField),
            other => Err(Error::UnknownFamily(other.to_string())),
        }
    }
}

impl fmt::Display for Family {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.word())
    }
}

pub type Rgb = [f64; 3];

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Palette {
    pub name: &'static str,
    pub colors: [Rgb; 2],
}

pub const PALETTES: [Palette; 6] = [
    Palette {
        name: "ember",
        colors: [[0.80, 0.20, 0.08], [0.98, 0.78, 0.25]],
    },
    Palette {
        name: "ocean",
        colors: [[0.04, 0.16, 0.45], [0.40, 0.82, 0.90]],
    },
    Palette {
        name: "forest",
        colors: [[0.08, 0.32, 0.12], [0.62, 0.76, 0.28]],
    },
    Palette {
        name: "dusk",
        colors: [[0.30, 0.10, 0.42], [0.96, 0.55, 0.45]],
    },
    Palette {
        name: "mono",
        colors: [[0.08, 0.08, 0.08], [0.92, 0.92, 0.92]],
    },
    Palette {
        name: "candy",
        colors: [[0.95, 0.40, 0.70], [0.55, 0.92, 0.80]],
    },
];

pub fn palette(name: &str) -> Result<Palette> {
    PALETTES
        .iter()
        .find(|p| p.name == name)
        .copied()
        .ok_or_else(|| Error::InvalidArgument(format!("unknown palette {name:?}")))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Scale {
    Fine,
    Coarse,
}

impl Scale {
    pub const ALL: [Scale; 2] = [Scale::Fine, Scale::Coarse];

    pub fn word(self) -> &'static str {
        match self {
            Scale::Fine => "fine",
            Scale::Coarse => "coarse",
        }
    }

    /// Pattern periods across the image width.
    fn periods(self) -> f64 {
        match self {
            Scale::Fine => 8.0,
            Scale::Coarse => 2.0,
        }
    }
}

/// A family rendered in a palette; the unit that inversion learns.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Style {
    pub family: Family,
    pub palette: Palette,
}

impl Style {
    pub fn new(family: Family, palette_name: &str) -> Result<Self> {
        Ok(Self {
            family,
            palette: palette(palette_name)?,
        })
    }

    pub fn id(&self) -> String {
        format!("{}-{}", self.family.word(), self.palette.name)
    }
}

/// Styles never shown during backbone pretraining.
pub fn held_out_styles() -> Vec<Style> {
    [
        (Family::Stripes, "dusk"),
        (Family::Dots, "ocean"),
        (Family::Checker, "ember"),
        (Family::Gradient, "candy"),
        (Family::NoiseField, "forest"),
    ]
    .iter()
    .map(|(f, p)| Style::new(*f, p).expect("static palette"))
    .collect()
}

pub fn is_held_out(family: Family, palette: &Palette) -> bool {
    held_out_styles()
        .iter()
        .any(|s| s.family == family && s.palette.name == palette.name)
}

/// Every word the caption grammar can produce.
pub fn caption_words() -> Vec<String> {
    let mut words: Vec<String> = ["a", "painting", "of", "in"].iter().map(|s| s.to_string()).collect();
    words.extend(Scale::ALL.iter().map(|s| s.word().to_string()));
    words.extend(Family::ALL.iter().map(|f| f.word().to_string()));
    words.extend(PALETTES.iter().map(|p| p.name.to_string()));
    words
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ProceduralStyleSpec {
    pub family: Family,
    pub palette: Palette,
    pub scale: Scale,
    pub size: usize,
    pub seed: u64,
}

impl ProceduralStyleSpec {
    pub fn caption(&self) -> String {
        format!(
            "a {} painting of {} in {}",
            self.scale.word(),
            self.family.word(),
            self.palette.name
        )
    }

    pub fn style(&self) -> Style {
        Style {
            family: self.family,
            palette: self.palette,
        }
    }
}

#[derive(Debug, Clone)]
pub struct CorpusExample {
    pub spec: ProceduralStyleSpec,
    pub image: PixelImage,
    pub caption: String,
}

fn lerp(a: Rgb, b: Rgb, w: f64) -> Rgb {
    [
        a[0] + (b[0] - a[0]) * w,
        a[1] + (b[1] - a[1]) * w,
        a[2] + (b[2] - a[2]) * w,
    ]
}

fn smooth(x: f64) -> f64 {
    x * x * (3.0 - 2.0 * x)
}

pub fn render_style(spec: &ProceduralStyleSpec) -> Result<PixelImage> {
    let n = spec.size;
    if n == 0 {
        return Err(Error::InvalidArgument("image size must be positive".into()));
    }
    let mut r = rng::stream(spec.seed, 0x5717E);
    let [c0, c1] = spec.palette.colors;
    let periods = spec.scale.periods();
    let cell = n as f64 / periods;
    let phase: f64 = r.gen();
    let vertical: bool = r.gen();
    let mut pixels = vec![[0.0; 3]; n * n];
    match spec.family {
        Family::Stripes => {
            for y in 0..n {
                for x in 0..n {
                    let u = if vertical { x } else { y } as f64;
                    let band = ((u / cell * 2.0 + phase * 2.0).floor() as i64).rem_euclid(2);
                    pixels[y * n + x] = if band == 0 { c0 } else { c1 };
                }
            }
        }
        Family::Dots => {
            let radius = cell * 0.3;
            let (ox, oy) = (phase * cell, r.gen::<f64>() * cell);
            for y in 0..n {
                for x in 0..n {
                    let fx = (x as f64 + 0.5 + ox).rem_euclid(cell) - cell / 2.0;
                    let fy = (y as f64 + 0.5 + oy).rem_euclid(cell) - cell / 2.0;
                    pixels[y * n + x] = if fx * fx + fy * fy <= radius * radius { c1 } else { c0 };
                }
            }
        }
        Family::Checker => {
            let half = (cell / 2.0).max(1.0) as usize;
            let swap = vertical as usize;
            for y in 0..n {
                for x in 0..n {
                    let parity = (x / half + y / half + swap) % 2;
                    pixels[y * n + x] = if parity == 0 { c0 } else { c1 };
                }
            }
        }
        Family::Gradient => {
            // Triangle wave along one axis.
            let reps = periods / 2.0;
            for y in 0..n {
                for x in 0..n {
                    let u = if vertical { x } else { y } as f64 / n as f64;
                    let s = (u * reps + phase).fract();
                    let w = 1.0 - (2.0 * s - 1.0).abs();
                    pixels[y * n + x] = lerp(c0, c1, w);
                }
            }
        }
        Family::NoiseField => {
            let grid = periods as usize + 1;
            let lattice: Vec<f64> = (0..grid * grid).map(|_| r.gen()).collect();
            for y in 0..n {
                for x in 0..n {
                    let gx = x as f64 / n as f64 * (grid - 1) as f64;
                    let gy = y as f64 / n as f64 * (grid - 1) as f64;
                    let (ix, iy) = (gx.floor() as usize, gy.floor() as usize);
                    let (tx, ty) = (smooth(gx - ix as f64), smooth(gy - iy as f64));
                    let at = |i: usize, j: usize| lattice[j.min(grid - 1) * grid + i.min(grid - 1)];
                    let top = at(ix, iy) * (1.0 - tx) + at(ix + 1, iy) * tx;
                    let bottom = at(ix, iy + 1) * (1.0 - tx) + at(ix + 1, iy + 1) * tx;
                    pixels[y * n + x] = lerp(c0, c1, top * (1.0 - ty) + bottom * ty);
                }
            }
        }
    }
    let mut data = vec![0.0; 3 * n * n];
    for (i, px) in pixels.iter().enumerate() {
        for c in 0..3 {
            data[c * n * n + i] = px[c];
        }
    }
    PixelImage::from_vec_clipped(data, n, n)
}

/// Reproducible corpus, stratified over families, palettes and scales, that
/// never includes a held-out style.
pub fn generate_corpus(n: usize, seed: u64, size: usize) -> Result<Vec<CorpusExample>> {
    if n == 0 {
        return Err(Error::InvalidArgument("corpus size must be at least 1".into()));
    }
    let mut r = rng::stream(seed, 0xC0A9);
    let families = Family::ALL.len();
    (0..n)
        .map(|i| {
            let family = Family::ALL[i % families];
            let allowed: Vec<Palette> = PALETTES.iter().copied().filter(|p| !is_held_out(family, p)).collect();
            let palette = allowed[(i / families) % allowed.len()];
            let scale = Scale::ALL[(i / (families * allowed.len())) % Scale::ALL.len()];
            let spec = ProceduralStyleSpec {
                family,
                palette,
                scale,
                size,
                seed: r.gen(),
            };
            Ok(CorpusExample {
                image: render_style(&spec)?,
                caption: spec.caption(),
                spec,
            })
        })
        .collect()
}

/// A reference image for a style, rendered outside the corpus seed space.
pub fn reference_image(style: &Style, scale: Scale, size: usize, seed: u64) -> Result<PixelImage> {
    render_style(&ProceduralStyleSpec {
        family: style.family,
        palette: style.palette,
        scale,
        size,
        seed,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec(family: Family, palette: &str) -> ProceduralStyleSpec {
        ProceduralStyleSpec {
            family,
            palette: super::palette(palette).unwrap(),
            scale: Scale::Coarse,
            size: 32,
            seed: 3,
        }
    }

    #[test]
    fn rendering_is_deterministic() {
        for f in Family::ALL {
            let a = render_style(&spec(f, "ocean")).unwrap();
            let b = render_style(&spec(f, "ocean")).unwrap();
            assert_eq!(a.to_vec(), b.to_vec());
        }
    }

    #[test]
    fn stripes_use_only_palette_colors() {
        let s = spec(Family::Stripes, "ember");
        let img = render_style(&s).unwrap();
        let rgb = img.to_vec();
        let hw = 32 * 32;
        for i in 0..hw {
            let px = [rgb[i], rgb[hw + i], rgb[2 * hw + i]];
            assert!(s.palette.colors.iter().any(|c| c == &px), "pixel {px:?}");
        }
    }

    #[test]
    fn checker_mean_is_palette_midpoint() {
        let s = spec(Family::Checker, "forest");
        let img = render_style(&s).unwrap();
        let v = img.to_vec();
        let hw = 32 * 32;
        for c in 0..3 {
            let mean = v[c * hw..(c + 1) * hw].iter().sum::<f64>() / hw as f64;
            let mid = 0.5 * (s.palette.colors[0][c] + s.palette.colors[1][c]);
            assert!((mean - mid).abs() < 1e-12);
        }
    }

    #[test]
    fn unknown_family_is_rejected() {
        assert!(matches!("spirals".parse::<Family>(), Err(Error::UnknownFamily(_))));
    }

    #[test]
    fn corpus_is_reproducible_and_stratified() {
        let a = generate_corpus(100, 7, 32).unwrap();
        let b = generate_corpus(100, 7, 32).unwrap();
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(x.caption, y.caption);
            assert_eq!(x.image.to_vec(), y.image.to_vec());
        }
        let big = generate_corpus(500, 1, 8).unwrap();
        for f in Family::ALL {
            let count = big.iter().filter(|e| e.spec.family == f).count();
            assert!((count as f64 / 100.0 - 1.0).abs() < 0.2);
        }
        assert!(generate_corpus(0, 1, 8).is_err());
    }

    #[test]
    fn held_out_styles_never_appear_in_captions() {
        let corpus = generate_corpus(300, 4, 8).unwrap();
        for style in held_out_styles() {
            let needle = format!("{} in {}", style.family.word(), style.palette.name);
            assert!(corpus.iter().all(|e| !e.caption.contains(&needle)), "{needle}");
        }
        let words = caption_words();
        for e in &corpus {
            assert!(e.caption.split(' ').all(|w| words.iter().any(|x| x == w)));
        }
    }
}
