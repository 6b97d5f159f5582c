//! Closed vocabulary of the synthetic referring task.

pub const PAD: usize = 0;
pub const BOS: usize = 1;
pub const EOS: usize = 2;
pub const OBJECT: usize = 3;
pub const AT: usize = 4;
pub const IS: usize = 5;
pub const OR: usize = 6;
pub const QUERY: usize = 7;

pub const N_COLORS: usize = 4;
pub const N_SHAPES: usize = 6;
/// Coarse location tokens tile the image 4 × 4.
pub const REGION_SIDE: usize = 4;
pub const N_REGIONS: usize = REGION_SIDE * REGION_SIDE;

const COLOR_BASE: usize = 8;
const SHAPE_BASE: usize = COLOR_BASE + N_COLORS;
const REGION_BASE: usize = SHAPE_BASE + N_SHAPES;

pub const VOCAB_SIZE: usize = 40;

const COLORS: [&str; N_COLORS] = ["red", "green", "blue", "yellow"];
const SHAPES: [&str; N_SHAPES] = ["square", "circle", "triangle", "star", "cross", "ring"];

pub fn color_token(color: usize) -> usize {
    assert!(color < N_COLORS);
    COLOR_BASE + color
}

pub fn shape_token(shape: usize) -> usize {
    assert!(shape < N_SHAPES);
    SHAPE_BASE + shape
}

pub fn region_token(region: usize) -> usize {
    assert!(region < N_REGIONS);
    REGION_BASE + region
}

pub fn is_shape_token(t: usize) -> bool {
    (SHAPE_BASE..SHAPE_BASE + N_SHAPES).contains(&t)
}

pub fn token_name(t: usize) -> String {
    match t {
        PAD => "<pad>".into(),
        BOS => "<bos>".into(),
        EOS => "<eos>".into(),
        OBJECT => "object".into(),
        AT => "at".into(),
        IS => "is".into(),
        OR => "or".into(),
        QUERY => "?".into(),
        t if (COLOR_BASE..SHAPE_BASE).contains(&t) => COLORS[t - COLOR_BASE].into(),
        t if (SHAPE_BASE..REGION_BASE).contains(&t) => SHAPES[t - SHAPE_BASE].into(),
        t if (REGION_BASE..REGION_BASE + N_REGIONS).contains(&t) => format!("<r{}>", t - REGION_BASE),
        t => format!("<unused{t}>"),
    }
}

pub fn detokenize(tokens: &[usize]) -> String {
    tokens.iter().map(|&t| token_name(t)).collect::<Vec<_>>().join(" ")
}

/// `<bos> object is A or B ?`; the last token is the answer-start position.
pub fn question(shape_a: usize, shape_b: usize) -> Vec<usize> {
    vec![BOS, OBJECT, IS, shape_token(shape_a), OR, shape_token(shape_b), QUERY]
}

/// `<bos> object at <region> is`, to be continued with `<color> <shape> <eos>`.
pub fn caption_prompt(region: usize) -> Vec<usize> {
    vec![BOS, OBJECT, AT, region_token(region), IS]
}
