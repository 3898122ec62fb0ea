//! NTP wire format: the 48-byte header shared by NTPv3 and NTPv4.
//!
//! Everything past byte 48 (extension fields, MACs) is ignored on decode.
//! Root delay and root dispersion are kept as their raw 16.16 words so that
//! `encode(decode(b)) == b` holds bit for bit.

use std::fmt;
use std::net::IpAddr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::capture::{CaptureRecord, CaptureTime};

pub const NTP_HEADER_LEN: usize = 48;

/// Seconds between 1900-01-01 (NTP era 0) and 1970-01-01.
pub const NTP_UNIX_OFFSET: u64 = 2_208_988_800;

pub const MODE_CLIENT: u8 = 3;
pub const MODE_SERVER: u8 = 4;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum CodecError {
    #[error("truncated NTP packet: {0} bytes, need 48")]
    TruncatedPacket(usize),
    #[error("unsupported NTP version {0}")]
    UnsupportedVersion(u8),
    #[error("field {field} out of range: {value}")]
    FieldOutOfRange { field: &'static str, value: i64 },
}

/// 64-bit NTP timestamp: 32 bits of seconds, 32 bits of binary fraction.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct NtpTimestamp {
    pub seconds: u32,
    pub fraction: u32,
}

impl NtpTimestamp {
    pub const UNSET: NtpTimestamp = NtpTimestamp { seconds: 0, fraction: 0 };

    pub fn from_raw(raw: u64) -> Self {
        Self {
            seconds: (raw >> 32) as u32,
            fraction: raw as u32,
        }
    }

    pub fn to_raw(self) -> u64 {
        ((self.seconds as u64) << 32) | self.fraction as u64
    }

    /// All-zero timestamps mean "not set" and carry no time information.
    pub fn is_unset(self) -> bool {
        self.seconds == 0 && self.fraction == 0
    }

    /// Era-0 reading in seconds. Rounds to the nearest `f64`; use
    /// [`NtpTimestamp::to_time`] when exact ordering matters.
    pub fn to_seconds_f64(self) -> f64 {
        self.seconds as f64 + self.fraction as f64 / 4_294_967_296.0
    }

    /// Resolve the era and place the timestamp on the absolute timeline.
    /// Returns `None` for unset timestamps.
    pub fn to_time(self, pivot: EraPivot) -> Option<NtpTime> {
        if self.is_unset() {
            return None;
        }
        let era: i128 = if self.seconds < pivot.0 { 1 } else { 0 };
        Some(NtpTime((era << 64) + self.to_raw() as i128))
    }
}

impl fmt::Display for NtpTimestamp {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:08x}.{:08x}", self.seconds, self.fraction)
    }
}

/// Era boundary for 32-bit NTP seconds: values below the pivot are read as
/// era 1 (after the 2036 rollover).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct EraPivot(pub u32);

impl Default for EraPivot {
    fn default() -> Self {
        EraPivot((NTP_UNIX_OFFSET / 2) as u32)
    }
}

/// Absolute NTP time in units of 2⁻³² s since 1900-01-01T00:00:00 (era 0).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NtpTime(pub i128);

impl NtpTime {
    const UNITS_PER_SEC: i128 = 1 << 32;

    /// Nanoseconds since the Unix epoch, rounded to the nearest 2⁻³² s.
    pub fn from_unix_nanos(nanos: i128) -> Self {
        let since_1900 = nanos + NTP_UNIX_OFFSET as i128 * 1_000_000_000;
        let scaled = since_1900 * Self::UNITS_PER_SEC;
        let q = scaled.div_euclid(1_000_000_000);
        let r = scaled.rem_euclid(1_000_000_000);
        NtpTime(if r * 2 >= 1_000_000_000 { q + 1 } else { q })
    }

    pub fn from_capture(ts: CaptureTime) -> Self {
        Self::from_unix_nanos(ts.secs as i128 * 1_000_000_000 + ts.nanos as i128)
    }

    /// Wire form; the era is dropped.
    pub fn to_timestamp(self) -> NtpTimestamp {
        NtpTimestamp::from_raw(self.0 as u64)
    }

    /// `self - earlier` in seconds.
    pub fn seconds_since(self, earlier: NtpTime) -> f64 {
        (self.0 - earlier.0) as f64 / Self::UNITS_PER_SEC as f64
    }

    pub fn to_unix_seconds_f64(self) -> f64 {
        self.0 as f64 / Self::UNITS_PER_SEC as f64 - NTP_UNIX_OFFSET as f64
    }
}

/// Signed 16.16 fixed point to seconds. Exact.
pub fn fixed_16_16_to_seconds(raw: i32) -> f64 {
    raw as f64 / 65_536.0
}

/// Unsigned 16.16 fixed point to seconds. Exact.
pub fn ufixed_16_16_to_seconds(raw: u32) -> f64 {
    raw as f64 / 65_536.0
}

/// Smallest 16.16 value that is `>= seconds`.
pub fn seconds_to_fixed_16_16_ceil(seconds: f64) -> Option<i32> {
    let scaled = (seconds * 65_536.0).ceil();
    if scaled.is_finite() && scaled >= i32::MIN as f64 && scaled <= i32::MAX as f64 {
        Some(scaled as i32)
    } else {
        None
    }
}

/// One decoded NTP header plus where and when it was captured.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NtpPacket {
    pub leap: u8,
    pub version: u8,
    pub mode: u8,
    pub stratum: u8,
    pub poll: i8,
    pub precision: i8,
    /// Raw signed 16.16 seconds.
    pub root_delay: i32,
    /// Raw unsigned 16.16 seconds.
    pub root_dispersion: u32,
    pub ref_id: [u8; 4],
    pub reference_ts: NtpTimestamp,
    pub origin_ts: NtpTimestamp,
    pub receive_ts: NtpTimestamp,
    pub transmit_ts: NtpTimestamp,
    pub capture_ts: CaptureTime,
    pub src: IpAddr,
    pub dst: IpAddr,
    pub sport: u16,
    pub dport: u16,
}

impl NtpPacket {
    pub fn root_delay_seconds(&self) -> f64 {
        fixed_16_16_to_seconds(self.root_delay)
    }

    pub fn root_dispersion_seconds(&self) -> f64 {
        ufixed_16_16_to_seconds(self.root_dispersion)
    }

    pub fn is_client_request(&self) -> bool {
        self.mode == MODE_CLIENT
    }

    pub fn is_server_response(&self) -> bool {
        self.mode == MODE_SERVER
    }

    /// True when every timestamp is unset (SNTP-style request).
    pub fn timestamps_zeroed(&self) -> bool {
        self.reference_ts.is_unset()
            && self.origin_ts.is_unset()
            && self.receive_ts.is_unset()
            && self.transmit_ts.is_unset()
    }

    /// Empty client request as sent by SNTP implementations: only the first
    /// octet is populated.
    pub fn sntp_request(meta: &CaptureRecord) -> Self {
        let mut p = Self::zeroed(meta);
        p.version = 4;
        p.mode = MODE_CLIENT;
        p
    }

    fn zeroed(meta: &CaptureRecord) -> Self {
        Self {
            leap: 0,
            version: 4,
            mode: 0,
            stratum: 0,
            poll: 0,
            precision: 0,
            root_delay: 0,
            root_dispersion: 0,
            ref_id: [0; 4],
            reference_ts: NtpTimestamp::UNSET,
            origin_ts: NtpTimestamp::UNSET,
            receive_ts: NtpTimestamp::UNSET,
            transmit_ts: NtpTimestamp::UNSET,
            capture_ts: meta.capture_ts,
            src: meta.src,
            dst: meta.dst,
            sport: meta.sport,
            dport: meta.dport,
        }
    }
}

fn read_u32(b: &[u8], at: usize) -> u32 {
    u32::from_be_bytes([b[at], b[at + 1], b[at + 2], b[at + 3]])
}

fn read_ts(b: &[u8], at: usize) -> NtpTimestamp {
    NtpTimestamp {
        seconds: read_u32(b, at),
        fraction: read_u32(b, at + 4),
    }
}

/// Decode the first 48 bytes of `payload`; capture metadata comes from `meta`.
pub fn decode_packet(payload: &[u8], meta: &CaptureRecord) -> Result<NtpPacket, CodecError> {
    if payload.len() < NTP_HEADER_LEN {
        return Err(CodecError::TruncatedPacket(payload.len()));
    }
    let b0 = payload[0];
    let version = (b0 >> 3) & 0x07;
    if version == 0 || version > 4 {
        return Err(CodecError::UnsupportedVersion(version));
    }
    Ok(NtpPacket {
        leap: b0 >> 6,
        version,
        mode: b0 & 0x07,
        stratum: payload[1],
        poll: payload[2] as i8,
        precision: payload[3] as i8,
        root_delay: read_u32(payload, 4) as i32,
        root_dispersion: read_u32(payload, 8),
        ref_id: [payload[12], payload[13], payload[14], payload[15]],
        reference_ts: read_ts(payload, 16),
        origin_ts: read_ts(payload, 24),
        receive_ts: read_ts(payload, 32),
        transmit_ts: read_ts(payload, 40),
        capture_ts: meta.capture_ts,
        src: meta.src,
        dst: meta.dst,
        sport: meta.sport,
        dport: meta.dport,
    })
}

/// Encode the 48-byte header. Capture metadata is not part of the wire form.
pub fn encode_packet(p: &NtpPacket) -> Result<[u8; NTP_HEADER_LEN], CodecError> {
    if p.leap > 3 {
        return Err(CodecError::FieldOutOfRange { field: "leap", value: p.leap as i64 });
    }
    if p.version == 0 || p.version > 4 {
        return Err(CodecError::FieldOutOfRange { field: "version", value: p.version as i64 });
    }
    if p.mode > 7 {
        return Err(CodecError::FieldOutOfRange { field: "mode", value: p.mode as i64 });
    }
    let mut out = [0u8; NTP_HEADER_LEN];
    out[0] = (p.leap << 6) | (p.version << 3) | p.mode;
    out[1] = p.stratum;
    out[2] = p.poll as u8;
    out[3] = p.precision as u8;
    out[4..8].copy_from_slice(&p.root_delay.to_be_bytes());
    out[8..12].copy_from_slice(&p.root_dispersion.to_be_bytes());
    out[12..16].copy_from_slice(&p.ref_id);
    for (at, ts) in [
        (16, p.reference_ts),
        (24, p.origin_ts),
        (32, p.receive_ts),
        (40, p.transmit_ts),
    ] {
        out[at..at + 4].copy_from_slice(&ts.seconds.to_be_bytes());
        out[at + 4..at + 8].copy_from_slice(&ts.fraction.to_be_bytes());
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::net::Ipv4Addr;

    fn meta() -> CaptureRecord {
        CaptureRecord {
            capture_ts: CaptureTime { secs: 1_433_116_800, nanos: 5_000 },
            src: IpAddr::V4(Ipv4Addr::new(10, 0, 0, 1)),
            dst: IpAddr::V4(Ipv4Addr::new(192, 0, 2, 1)),
            sport: 50123,
            dport: 123,
            payload: Vec::new(),
        }
    }

    #[test]
    fn zeroed_sntp_request() {
        let mut buf = [0u8; 48];
        buf[0] = 0x23;
        let p = decode_packet(&buf, &meta()).unwrap();
        assert_eq!(p.version, 4);
        assert_eq!(p.mode, 3);
        assert_eq!(p.stratum, 0);
        assert!(p.timestamps_zeroed());
        assert_eq!(encode_packet(&p).unwrap(), buf);
        assert_eq!(p, NtpPacket::sntp_request(&meta()));
    }

    #[test]
    fn root_delay_one_second() {
        let mut buf = [0u8; 48];
        buf[0] = 0x23;
        buf[4..8].copy_from_slice(&[0x00, 0x01, 0x00, 0x00]);
        let p = decode_packet(&buf, &meta()).unwrap();
        assert_eq!(p.root_delay_seconds(), 1.0);
    }

    #[test]
    fn unix_epoch_transmit() {
        let mut buf = [0u8; 48];
        buf[0] = 0x24;
        buf[40..44].copy_from_slice(&0x83AA_7E80u32.to_be_bytes());
        let p = decode_packet(&buf, &meta()).unwrap();
        assert_eq!(p.transmit_ts.seconds as u64, NTP_UNIX_OFFSET);
        let t = p.transmit_ts.to_time(EraPivot::default()).unwrap();
        assert_eq!(t.to_unix_seconds_f64(), 0.0);
    }

    #[test]
    fn root_delay_encoding_oracle() {
        // 0.015625 s * 2^16 = 1024, computed independently as an integer product.
        let raw = (0.015625f64 * 65536.0) as i32;
        assert_eq!(raw, 1024);
        let mut p = NtpPacket::sntp_request(&meta());
        p.poll = 6;
        p.root_delay = seconds_to_fixed_16_16_ceil(0.015625).unwrap();
        let bytes = encode_packet(&p).unwrap();
        assert_eq!(&bytes[4..8], &[0x00, 0x00, 0x04, 0x00]);
        assert_eq!(bytes[2], 6);
    }

    #[test]
    fn fixed_point_values() {
        assert_eq!(fixed_16_16_to_seconds(0x0001_0000), 1.0);
        assert_eq!(fixed_16_16_to_seconds(0x0000_8000), 0.5);
        assert_eq!(fixed_16_16_to_seconds(0xFFFF_0000u32 as i32), -1.0);
    }

    #[test]
    fn decode_errors() {
        assert_eq!(
            decode_packet(&[0x23; 47], &meta()),
            Err(CodecError::TruncatedPacket(47))
        );
        let mut buf = [0u8; 48];
        buf[0] = 0x03; // version 0
        assert_eq!(decode_packet(&buf, &meta()), Err(CodecError::UnsupportedVersion(0)));
        buf[0] = 0x2B; // version 5
        assert_eq!(decode_packet(&buf, &meta()), Err(CodecError::UnsupportedVersion(5)));
    }

    #[test]
    fn extension_bytes_ignored() {
        let mut buf = vec![0u8; 68];
        buf[0] = 0x23;
        buf[60] = 0xAA;
        let p = decode_packet(&buf, &meta()).unwrap();
        assert_eq!(encode_packet(&p).unwrap()[..], buf[..48]);
    }

    #[test]
    fn encode_rejects_bad_fields() {
        let mut p = NtpPacket::sntp_request(&meta());
        p.version = 5;
        assert!(matches!(
            encode_packet(&p),
            Err(CodecError::FieldOutOfRange { field: "version", .. })
        ));
        p.version = 4;
        p.leap = 4;
        assert!(encode_packet(&p).is_err());
    }

    #[test]
    fn era_pivot() {
        let pivot = EraPivot::default();
        let early = NtpTimestamp { seconds: 10, fraction: 0 };
        let late = NtpTimestamp { seconds: u32::MAX, fraction: 0 };
        // 10 s past the 2036 rollover sorts after the last era-0 second.
        assert!(early.to_time(pivot).unwrap() > late.to_time(pivot).unwrap());
        assert_eq!(NtpTimestamp::UNSET.to_time(pivot), None);
    }

    #[test]
    fn unix_nanos_rounding() {
        let t = NtpTime::from_unix_nanos(0);
        assert_eq!(t.to_timestamp(), NtpTimestamp { seconds: 0x83AA_7E80, fraction: 0 });
        // 0.5 s is exactly 2^31 fraction units.
        let h = NtpTime::from_unix_nanos(500_000_000);
        assert_eq!(h.to_timestamp().fraction, 1 << 31);
        assert_eq!(h.seconds_since(t), 0.5);
    }
}
