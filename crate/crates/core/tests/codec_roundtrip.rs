use moveover::protocol::codec::{
    decode, encode, Envelope, Header, Message, StationRole, Trr, VehicleStatus, WireWaypoint, MAX_TRRS, MAX_WAYPOINTS,
};
use proptest::prelude::*;

fn envelope() -> impl Strategy<Value = Envelope> {
    let header = (
        any::<u8>(),
        any::<u8>(),
        any::<u32>(),
        any::<u32>(),
        any::<i32>(),
        any::<i32>(),
        any::<i16>(),
        any::<u16>(),
        any::<u8>(),
    )
        .prop_map(
            |(
                version,
                message_id,
                station_id,
                generation_time_ms,
                ref_latitude,
                ref_longitude,
                altitude_cm,
                heading,
                sequence,
            )| Header {
                version,
                message_id,
                station_id,
                generation_time_ms,
                ref_latitude,
                ref_longitude,
                altitude_cm,
                heading,
                sequence,
            },
        );
    let status = (
        any::<u16>(),
        any::<u16>(),
        any::<i16>(),
        any::<u8>(),
        any::<u8>(),
        any::<u8>(),
        any::<u8>(),
    )
        .prop_map(
            |(speed_cms, heading, accel_cms2, length_dm, width_dm, lane, path)| VehicleStatus {
                speed_cms,
                heading,
                accel_cms2,
                length_dm,
                width_dm,
                lane,
                path,
            },
        );
    (header, 0u8..16, any::<bool>(), status).prop_map(|(header, station_type, ctrl, status)| Envelope {
        header,
        station_type,
        role: if ctrl {
            StationRole::Controller
        } else {
            StationRole::Vehicle
        },
        status,
    })
}

fn waypoint() -> impl Strategy<Value = WireWaypoint> {
    (any::<u32>(), any::<i32>(), any::<u16>(), any::<i8>()).prop_map(|(t_ms, s_cm, v_cms, accel_dms2)| WireWaypoint {
        t_ms,
        s_cm,
        v_cms,
        accel_dms2,
    })
}

fn trr() -> impl Strategy<Value = Trr> {
    (
        any::<u8>(),
        any::<u8>(),
        any::<u32>(),
        prop::option::of(0u32..0xFF_FFFF),
    )
        .prop_map(|(zone, flags, start_ms, duration_ms)| Trr {
            zone,
            flags,
            start_ms,
            duration_ms,
        })
}

fn message() -> impl Strategy<Value = Message> {
    prop_oneof![
        (envelope(), prop::collection::vec(waypoint(), 0..=MAX_WAYPOINTS))
            .prop_map(|(env, waypoints)| Message::Proposal { env, waypoints }),
        (envelope(), prop::collection::vec(trr(), 0..=MAX_TRRS))
            .prop_map(|(env, trrs)| Message::Response { env, trrs }),
        envelope().prop_map(|env| Message::Cancel { env }),
    ]
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(10_000))]

    #[test]
    fn decode_inverts_encode(msg in message()) {
        let bytes = encode(&msg).unwrap();
        prop_assert_eq!(bytes.len(), msg.encoded_len());
        prop_assert_eq!(decode(&bytes).unwrap(), msg);
    }
}

proptest! {
    #[test]
    fn truncation_never_yields_the_original(msg in message(), cut in 1usize..40) {
        // Dropping whole items leaves a shorter valid message; anything else
        // must be rejected.
        let bytes = encode(&msg).unwrap();
        let keep = bytes.len().saturating_sub(cut);
        if let Ok(m) = decode(&bytes[..keep]) {
            prop_assert_ne!(&m, &msg);
            prop_assert_eq!(m.encoded_len(), keep);
        }
    }
}

#[test]
fn full_messages_fit_budgets() {
    let env = Envelope::default();
    let wp = WireWaypoint {
        t_ms: 1,
        s_cm: 2,
        v_cms: 3,
        accel_dms2: 4,
    };
    let proposal = Message::Proposal {
        env,
        waypoints: vec![wp; MAX_WAYPOINTS],
    };
    let t = Trr {
        zone: 1,
        flags: 0,
        start_ms: 5,
        duration_ms: Some(6),
    };
    let response = Message::Response {
        env,
        trrs: vec![t; MAX_TRRS],
    };
    let cancel = Message::Cancel { env };
    let sizes: Vec<usize> = [&proposal, &response, &cancel]
        .iter()
        .map(|m| encode(m).unwrap().len())
        .collect();
    assert_eq!(sizes, [476, 126, 37]);
    assert!(sizes[0] < 500 && sizes[1] < 130 && sizes[2] < 40);
    assert!(encode(&Message::Proposal {
        env,
        waypoints: vec![wp; MAX_WAYPOINTS + 1]
    })
    .is_err());
}
