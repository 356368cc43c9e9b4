//! The five reference prompt rows and the structured fields they come from.

use disth_core::metadata::{AcquisitionParams, Plane};

pub const ROWS: &str = include_str!("../fixtures/appendix_prompts.txt");

#[allow(clippy::too_many_arguments)]
fn acq(
    plane: Plane,
    scanner: (&str, &str, f64),
    acquisition: (&str, &str, Option<&str>),
    te: f64,
    tr: f64,
    ti: Option<f64>,
    flip: f64,
) -> AcquisitionParams {
    AcquisitionParams {
        te_s: te,
        tr_s: tr,
        ti_s: ti,
        flip_deg: flip,
        manufacturer: Some(scanner.0.into()),
        model: Some(scanner.1.into()),
        field_t: scanner.2,
        description: Some(acquisition.0.into()),
        sequence: Some(acquisition.1.into()),
        variant: acquisition.2.map(Into::into),
        plane,
    }
}

pub fn structured_rows() -> Vec<AcquisitionParams> {
    vec![
        acq(Plane::Axial, ("GE", "Signa_HDxt", 1.5), ("Ax T2 FLAIR", "SE_IR", Some("SK")), 0.129, 8.002, Some(2.0), 90.0),
        acq(Plane::Axial, ("GE", "Signa_HDxt", 1.5), ("Ax PD/T2", "SE", Some("SK")), 0.0203, 5.9, None, 90.0),
        acq(Plane::Axial, ("Siemens", "Aera", 1.5), ("t2_tse_tra_384_p2", "SE", Some("SK_SP_OSP")), 0.087, 3.96, None, 150.0),
        acq(Plane::Axial, ("Siemens", "Avanto", 1.5), ("pd+t2_tse_tra", "SE", Some("SK_SP_OSP")), 0.014, 3.68, None, 150.0),
        acq(Plane::Coronal, ("GE", "SIGNA_HDx", 1.5), ("Cor T1", "SE", None), 0.02, 0.4, None, 90.0),
    ]
}
