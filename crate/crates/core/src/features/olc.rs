//! Open Location Code ("Plus Code") encoding for the pair section of a code.
//!
//! Only even lengths up to 10 are supported; those are the lengths made of
//! whole latitude/longitude digit pairs, which is all a region vocabulary
//! needs.

const ALPHABET: &[u8; 20] = b"23456789CFGHJMPQRVWX";
const SEPARATOR_POSITION: usize = 8;
const PAIR_CODE_LENGTH: usize = 10;
// Integer precision of the reference implementation: 1/8000 degree per
// unit after five pairs, with the grid refinement factored back in.
const PAIR_PRECISION: i64 = 8000;
const FINAL_LAT_PRECISION: i64 = PAIR_PRECISION * 3125;
const FINAL_LNG_PRECISION: i64 = PAIR_PRECISION * 1024;

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("plus code length must be one of 2, 4, 6, 8, 10; got {0}")]
pub struct InvalidCodeLength(pub usize);

/// Encodes a coordinate as a Plus Code of `code_length` significant digits.
///
/// Latitude is clipped to [-90, 90] (90 maps into the topmost cell) and
/// longitude is wrapped into [-180, 180). Codes shorter than eight digits
/// are padded with `0` up to the `+` separator.
pub fn encode(lat: f64, lon: f64, code_length: usize) -> Result<String, InvalidCodeLength> {
    if !(2..=PAIR_CODE_LENGTH).contains(&code_length) || !code_length.is_multiple_of(2) {
        return Err(InvalidCodeLength(code_length));
    }

    let mut lat_val = (lat * FINAL_LAT_PRECISION as f64).round() as i64 + 90 * FINAL_LAT_PRECISION;
    lat_val = lat_val.clamp(0, 180 * FINAL_LAT_PRECISION - 1);
    let mut lng_val = (lon * FINAL_LNG_PRECISION as f64).round() as i64 + 180 * FINAL_LNG_PRECISION;
    lng_val = lng_val.rem_euclid(360 * FINAL_LNG_PRECISION);

    // Drop the grid-refinement part; what remains counts 1/8000 degree.
    lat_val /= FINAL_LAT_PRECISION / PAIR_PRECISION;
    lng_val /= FINAL_LNG_PRECISION / PAIR_PRECISION;

    let mut digits = [0u8; PAIR_CODE_LENGTH];
    for pair in (0..PAIR_CODE_LENGTH / 2).rev() {
        digits[2 * pair] = ALPHABET[(lat_val % 20) as usize];
        digits[2 * pair + 1] = ALPHABET[(lng_val % 20) as usize];
        lat_val /= 20;
        lng_val /= 20;
    }

    let mut code = String::with_capacity(PAIR_CODE_LENGTH + 1);
    for (i, &d) in digits.iter().enumerate().take(code_length) {
        if i == SEPARATOR_POSITION {
            code.push('+');
        }
        code.push(d as char);
    }
    if code_length < SEPARATOR_POSITION {
        code.extend(std::iter::repeat_n('0', SEPARATOR_POSITION - code_length));
    }
    if code_length <= SEPARATOR_POSITION {
        code.push('+');
    }
    Ok(code)
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Floating-point digit-by-digit encoder following the original
    /// published description: shift to positive ranges, then peel off one
    /// base-20 digit per pair at resolutions 20, 1, 1/20, 1/400, 1/8000.
    fn oracle(lat: f64, lon: f64, len: usize) -> String {
        let alphabet: Vec<char> = "23456789CFGHJMPQRVWX".chars().collect();
        let mut lat = lat.clamp(-90.0, 90.0);
        if lat == 90.0 {
            lat -= 20f64.powi(2 - (len as i32) / 2);
        }
        let mut lon = lon;
        while lon < -180.0 {
            lon += 360.0;
        }
        while lon >= 180.0 {
            lon -= 360.0;
        }
        let mut lat = lat + 90.0;
        let mut lon = lon + 180.0;
        let mut out = String::new();
        let mut res = 20.0;
        for pair in 0..len / 2 {
            let dlat = (lat / res).floor();
            let dlon = (lon / res).floor();
            lat -= dlat * res;
            lon -= dlon * res;
            out.push(alphabet[dlat as usize]);
            out.push(alphabet[dlon as usize]);
            if pair < 4 {
                res /= 20.0;
            }
        }
        if len < 8 {
            out.push_str(&"0".repeat(8 - len));
            out.push('+');
        } else if len == 8 {
            out.push('+');
        } else {
            out.insert(8, '+');
        }
        out
    }

    #[test]
    fn origin_codes() {
        assert_eq!(encode(0.0, 0.0, 10).unwrap(), "6FG22222+22");
        assert_eq!(encode(0.0, 0.0, 6).unwrap(), "6FG22200+");
        assert_eq!(encode(0.0, 0.0, 6).unwrap(), oracle(0.0, 0.0, 6));
    }

    #[test]
    fn nearby_points_share_degree_cell() {
        assert_eq!(encode(40.7112, -74.0043, 4), encode(40.7122, -74.0053, 4));
    }

    #[test]
    fn north_pole_is_clipped() {
        let code = encode(90.0, 10.0, 10).unwrap();
        assert_eq!(code, oracle(90.0, 10.0, 10));
        assert!(code.starts_with('C'));
        assert_eq!(encode(90.0, 10.0, 4).unwrap(), encode(89.5, 10.0, 4).unwrap());
    }

    #[test]
    fn longitude_wraps() {
        assert_eq!(encode(10.0, 180.0, 8).unwrap(), encode(10.0, -180.0, 8).unwrap());
        assert_eq!(encode(10.0, 190.0, 8).unwrap(), encode(10.0, -170.0, 8).unwrap());
    }

    #[test]
    fn bad_lengths_rejected() {
        for len in [0, 1, 3, 7, 11, 12] {
            assert_eq!(encode(0.0, 0.0, len), Err(InvalidCodeLength(len)));
        }
    }

    #[test]
    fn matches_float_oracle_on_grid() {
        // Sample off the exact cell boundaries so floating truncation in the
        // oracle cannot disagree with the integer path.
        let mut checked = 0;
        for i in 0..60 {
            for j in 0..60 {
                let lat = -89.876_543_21 + i as f64 * 2.997_317;
                let lon = -179.812_345_67 + j as f64 * 5.994_173;
                for len in [2, 4, 6, 8, 10] {
                    assert_eq!(encode(lat, lon, len).unwrap(), oracle(lat, lon, len), "{lat} {lon} {len}");
                    checked += 1;
                }
            }
        }
        assert_eq!(checked, 18_000);
    }
}
