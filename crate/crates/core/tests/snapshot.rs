//! Adversarial snapshot scenario: all local-convergence flags arm while one
//! stale large-error value is still in flight. The snapshot round must fail
//! (the frozen global state's true residual is five times the threshold) and a
//! later round with consistent data must succeed.
//!
//! The scenario is fully scripted: two detector state machines are driven by
//! hand with a known global state, and the certified values are checked
//! against a dense residual oracle.

use itercomm_core::convergence::{local_accumulate, Action, Detector, NormSpec};

const THRESHOLD: f64 = 0.1;

/// Dense residual of the 2x2 system A = [[2, 1], [1, 2]], b = (3, 3) whose
/// fixed point is (1, 1); equals the scaled Jacobi update difference
/// d * (f(x) - x) componentwise.
fn dense_residual(x: [f64; 2]) -> [f64; 2] {
    [3.0 - 2.0 * x[0] - x[1], 3.0 - x[0] - 2.0 * x[1]]
}

fn jacobi_eval(halo: f64) -> f64 {
    (3.0 - halo) / 2.0
}

fn spec() -> NormSpec {
    NormSpec::new(0.5, THRESHOLD).unwrap()
}

#[test]
fn stale_in_flight_data_forces_a_resume_before_detection() {
    // Rank 0 is the tree root; the graph is the single link 0 <-> 1.
    let mut d0 = Detector::new(None, vec![1], vec![1], spec());
    let mut d1 = Detector::new(Some(0), vec![], vec![0], spec());

    // True state: rank 0 holds 1.0 (converged), rank 1 holds 1.25 because the
    // fresh value it computed never made it out; the update differences both
    // ranks see locally are tiny, so every flag arms.
    d1.set_armed(true);
    assert_eq!(d1.take_actions(), vec![Action::NotifyParent { round: 0 }]);
    d0.on_local_conv(1, 0);
    d0.set_armed(true);
    assert_eq!(
        d0.take_actions(),
        vec![Action::FreezeAndSendSnapshots { round: 0 }]
    );
    d0.record_frozen_send(1, vec![1.0]);

    // Rank 1 freezes on the snapshot message; its frozen outgoing value is
    // the stale 1.25 still sitting in its send buffer.
    d1.on_snapshot_data(0, 0, vec![1.0]);
    let acts = d1.take_actions();
    assert_eq!(acts, vec![Action::FreezeAndSendSnapshots { round: 0 }]);
    d1.record_frozen_send(0, vec![1.25]);
    d0.on_snapshot_data(1, 0, vec![1.25]);

    // The frozen global vector is x = (1.0, 1.25): its true residual is
    // (-0.25, -0.5), max norm 0.5 = 5 * threshold, all exact in binary so
    // the norm comparisons below can use equality.
    let frozen = [1.0, 1.25];
    let oracle = dense_residual(frozen);
    assert_eq!(oracle[1].abs(), 5.0 * THRESHOLD);

    // Each rank evaluates one Jacobi application on the frozen vector; the
    // scaled update difference reproduces the dense residual exactly.
    assert!(d0.eval_pending() && d1.eval_pending());
    let r0 = 2.0 * (jacobi_eval(frozen[1]) - frozen[0]);
    let r1 = 2.0 * (jacobi_eval(frozen[0]) - frozen[1]);
    assert_eq!([r0, r1], oracle);

    d1.submit_eval(local_accumulate(&[r1], &spec()));
    let up = match &d1.take_actions()[..] {
        [Action::SendNormUp { round: 0, acc }] => *acc,
        other => panic!("unexpected actions {other:?}"),
    };
    d0.submit_eval(local_accumulate(&[r0], &spec()));
    d0.on_norm_up(1, 0, up);

    // The round concludes without detection and iterations resume.
    let acts = d0.take_actions();
    assert_eq!(acts.len(), 1);
    match acts[0] {
        Action::BroadcastResume { round: 0, value } => {
            assert_eq!(value, 5.0 * THRESHOLD);
        }
        ref other => panic!("premature detection: {other:?}"),
    }
    assert!(!d0.is_terminated());
    d1.on_norm_down(0, 5.0 * THRESHOLD, false);
    assert!(!d1.is_terminated());
    assert_eq!(d0.round(), 1);
    assert_eq!(d1.round(), 1);

    // Round 1: the stale value has been replaced; the frozen global vector
    // is the fixed point and the round certifies it.
    let a = d1.take_actions();
    assert!(a.contains(&Action::NotifyParent { round: 1 }));
    d0.on_local_conv(1, 1);
    assert_eq!(
        d0.take_actions(),
        vec![Action::FreezeAndSendSnapshots { round: 1 }]
    );
    d0.record_frozen_send(1, vec![1.0]);
    d1.on_snapshot_data(0, 1, vec![1.0]);
    assert_eq!(
        d1.take_actions(),
        vec![Action::FreezeAndSendSnapshots { round: 1 }]
    );
    d1.record_frozen_send(0, vec![1.0]);
    d0.on_snapshot_data(1, 1, vec![1.0]);

    let fixed = [1.0, 1.0];
    let oracle = dense_residual(fixed);
    assert_eq!(oracle, [0.0, 0.0]);
    d1.submit_eval(local_accumulate(&[oracle[1]], &spec()));
    let up = match &d1.take_actions()[..] {
        [Action::SendNormUp { round: 1, acc }] => *acc,
        other => panic!("unexpected actions {other:?}"),
    };
    d0.submit_eval(local_accumulate(&[oracle[0]], &spec()));
    d0.on_norm_up(1, 1, up);
    assert_eq!(
        d0.take_actions(),
        vec![Action::BroadcastTerminate { round: 1 }]
    );
    assert!(d0.is_terminated());
    d1.on_terminate(1);
    assert!(d1.is_terminated());

    // The audit trail shows a failed round 0 and a certified round 1, with
    // frozen payloads matching per link in both rounds.
    let rec0 = d0.into_records();
    let rec1 = d1.into_records();
    assert_eq!(rec0.len(), 2);
    assert!(!rec0[0].detected && rec0[0].completed);
    assert_eq!(rec0[0].value, Some(5.0 * THRESHOLD));
    assert!(rec0[1].detected);
    for round in 0..2 {
        let sent_0to1: Vec<_> = rec0[round].sent.iter().map(|(_, v)| v).collect();
        let got_at_1: Vec<_> = rec1[round].received.iter().map(|(_, v)| v).collect();
        assert_eq!(sent_0to1, got_at_1, "link 0->1 round {round}");
        let sent_1to0: Vec<_> = rec1[round].sent.iter().map(|(_, v)| v).collect();
        let got_at_0: Vec<_> = rec0[round].received.iter().map(|(_, v)| v).collect();
        assert_eq!(sent_1to0, got_at_0, "link 1->0 round {round}");
    }
}
