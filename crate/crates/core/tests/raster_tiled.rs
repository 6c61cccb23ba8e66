//! Tiled GeoTIFF written byte by byte, read back through the window reader.

use hcforge::chip::geotiff::{RasterCrs, SceneReader};

const W: u32 = 40;
const H: u32 = 30;
const TILE: u32 = 16;
const ORIGIN: (f64, f64) = (300_000.0, 8_300_000.0);

enum Val {
    Short(Vec<u16>),
    Long(Vec<u32>),
    Double(Vec<f64>),
}

fn build() -> Vec<u8> {
    let across = W.div_ceil(TILE);
    let down = H.div_ceil(TILE);
    let mut pixels = Vec::new();
    let mut offsets = Vec::new();
    let mut counts = Vec::new();
    let header = 8u32;
    for ty in 0..down {
        for tx in 0..across {
            offsets.push(header + pixels.len() as u32);
            for r in 0..TILE {
                for c in 0..TILE {
                    let (col, row) = (tx * TILE + c, ty * TILE + r);
                    if col < W && row < H {
                        pixels.extend([col as u8, row as u8, 200]);
                    } else {
                        pixels.extend([255, 255, 255]);
                    }
                }
            }
            counts.push(TILE * TILE * 3);
        }
    }
    let entries: Vec<(u16, Val)> = vec![
        (256, Val::Long(vec![W])),
        (257, Val::Long(vec![H])),
        (258, Val::Short(vec![8, 8, 8])),
        (259, Val::Short(vec![1])),
        (262, Val::Short(vec![2])),
        (277, Val::Short(vec![3])),
        (284, Val::Short(vec![1])),
        (322, Val::Long(vec![TILE])),
        (323, Val::Long(vec![TILE])),
        (324, Val::Long(offsets)),
        (325, Val::Long(counts)),
        (33550, Val::Double(vec![10.0, 10.0, 0.0])),
        (
            33922,
            Val::Double(vec![0.0, 0.0, 0.0, ORIGIN.0, ORIGIN.1, 0.0]),
        ),
        (
            34735,
            Val::Short(vec![
                1, 1, 0, 3, 1024, 0, 1, 1, 1025, 0, 1, 1, 3072, 0, 1, 32723,
            ]),
        ),
    ];

    let ifd_at = header + pixels.len() as u32;
    let ifd_len = 2 + 12 * entries.len() as u32 + 4;
    let mut extra = Vec::new();
    let mut ifd = (entries.len() as u16).to_le_bytes().to_vec();
    for (tag, val) in &entries {
        let (kind, n, raw): (u16, usize, Vec<u8>) = match val {
            Val::Short(v) => (3, v.len(), v.iter().flat_map(|x| x.to_le_bytes()).collect()),
            Val::Long(v) => (4, v.len(), v.iter().flat_map(|x| x.to_le_bytes()).collect()),
            Val::Double(v) => (
                12,
                v.len(),
                v.iter().flat_map(|x| x.to_le_bytes()).collect(),
            ),
        };
        ifd.extend(tag.to_le_bytes());
        ifd.extend(kind.to_le_bytes());
        ifd.extend((n as u32).to_le_bytes());
        if raw.len() <= 4 {
            let mut inline = raw.clone();
            inline.resize(4, 0);
            ifd.extend(inline);
        } else {
            ifd.extend((ifd_at + ifd_len + extra.len() as u32).to_le_bytes());
            extra.extend(raw);
            if extra.len() % 2 == 1 {
                extra.push(0);
            }
        }
    }
    ifd.extend(0u32.to_le_bytes());

    let mut out = b"II".to_vec();
    out.extend(42u16.to_le_bytes());
    out.extend(ifd_at.to_le_bytes());
    out.extend(pixels);
    out.extend(ifd);
    out.extend(extra);
    out
}

fn open() -> (tempfile::TempDir, SceneReader) {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("tiled.tif");
    std::fs::write(&path, build()).unwrap();
    let reader = SceneReader::open(&path).unwrap();
    (dir, reader)
}

#[test]
fn georef_from_utm_keys() {
    let (_dir, r) = open();
    assert_eq!((r.width, r.height), (W, H));
    assert_eq!(
        r.georef.crs,
        RasterCrs::Utm {
            zone: 23,
            north: false
        }
    );
    assert_eq!(
        r.georef.transform,
        [ORIGIN.0, 10.0, 0.0, ORIGIN.1, 0.0, -10.0]
    );
}

#[test]
fn windows_across_tile_edges() {
    let (_dir, mut r) = open();
    for &(x0, y0, x1, y1) in &[
        (0, 0, 40, 30),
        (14, 13, 19, 18),
        (30, 20, 40, 30),
        (15, 15, 17, 17),
        (39, 29, 40, 30),
    ] {
        let win = r.read_window(x0, y0, x1, y1).unwrap();
        assert_eq!((win.width, win.height), (x1 - x0, y1 - y0));
        for row in y0..y1 {
            for col in x0..x1 {
                assert_eq!(
                    win.pixel(col, row),
                    [col as u8, row as u8, 200],
                    "({col},{row})"
                );
            }
        }
    }
}

#[test]
fn windows_clamp_to_the_image() {
    let (_dir, mut r) = open();
    let win = r.read_window(36, 26, 60, 50).unwrap();
    assert_eq!((win.width, win.height), (4, 4));
    assert_eq!(win.pixel(39, 29), [39, 29, 200]);
    let empty = r.read_window(45, 0, 50, 5).unwrap();
    assert!(empty.data.is_empty());
}
