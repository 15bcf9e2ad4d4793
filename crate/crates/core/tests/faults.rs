//! Random fault schedules: nothing leaks, and everything sent arrives once
//! the network is healthy again.

use dossier_core::sim::scenario::{Action, Target};
use dossier_core::sim::{BackendKind, NetControl, World};
use proptest::prelude::*;

#[derive(Debug, Clone)]
enum Step {
    Net(&'static str, NetControl),
    Act(&'static str, Action),
}

fn control() -> impl Strategy<Value = NetControl> {
    prop_oneof![
        Just(NetControl::up()),
        Just(NetControl::down()),
        (0u64..4).prop_map(|n| NetControl { drop_after_n_messages: Some(n), ..Default::default() }),
        (1u64..20).prop_map(|l| NetControl { latency_ms: l, ..Default::default() }),
    ]
}

fn step(with_revoke: bool) -> impl Strategy<Value = Step> {
    let who = prop_oneof![Just("alice"), Just("bob")];
    let target = (0usize..3).prop_map(Target::One);
    let mut owner = vec![
        target.clone().prop_map(|t| Action::Grant("bob".into(), t)).boxed(),
        target.clone().prop_map(Action::Send).boxed(),
        target.clone().prop_map(Action::Update).boxed(),
        Just(Action::Flush).boxed(),
    ];
    if with_revoke {
        owner.push(target.prop_map(|t| Action::Revoke("bob".into(), t)).boxed());
    }
    let receiver = prop_oneof![
        Just(Action::Receive),
        Just(Action::UseAll),
        Just(Action::Restart { eager: false }),
        Just(Action::Restart { eager: true }),
    ];
    prop_oneof![
        2 => (who, control()).prop_map(|(w, c)| Step::Net(w, c)),
        3 => proptest::strategy::Union::new(owner).prop_map(|a| Step::Act("alice", a)),
        2 => receiver.prop_map(|a| Step::Act("bob", a)),
    ]
}

fn setup(kind: BackendKind, seed: u64) -> World {
    let mut w = World::new(kind, seed, None).unwrap();
    w.add_clients(&["alice".into(), "bob".into()]).unwrap();
    w.act("alice", &Action::Insert(3)).unwrap();
    w.act("alice", &Action::Grant("bob".into(), Target::All)).unwrap();
    w
}

fn play(w: &mut World, steps: &[Step]) {
    for s in steps {
        match s {
            Step::Net(who, c) => w.net.set_control(who, c.clone()),
            // Faults surface as outcomes, not errors.
            Step::Act(who, a) => {
                w.act(who, a).unwrap();
            }
        }
    }
}

fn heal(w: &mut World) {
    w.net.set_control("alice", NetControl::up());
    w.net.set_control("bob", NetControl::up());
    for _ in 0..3 {
        w.act("alice", &Action::Flush).unwrap();
        w.act("bob", &Action::Receive).unwrap();
    }
}

fn kind() -> impl Strategy<Value = BackendKind> {
    prop_oneof![Just(BackendKind::Service), Just(BackendKind::Mailbox)]
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn no_schedule_leaks(kind in kind(), seed in any::<u64>(), steps in prop::collection::vec(step(true), 0..32)) {
        let mut w = setup(kind, seed);
        play(&mut w, &steps);
        heal(&mut w);
        let leaks = w.leaks().unwrap();
        prop_assert!(leaks.is_empty(), "{leaks:?}");
    }

    #[test]
    fn sent_rows_arrive_after_faults_clear(
        kind in kind(),
        seed in any::<u64>(),
        steps in prop::collection::vec(step(false), 0..32),
    ) {
        let mut w = setup(kind, seed);
        play(&mut w, &steps);
        heal(&mut w);
        let ids = w.dossiers["alice"].clone();
        let expected: Vec<(u64, Option<u64>)> = {
            let alice = w.client("alice").unwrap();
            prop_assert_eq!(alice.outbox_len(), 0);
            ids.iter().map(|d| (*d, alice.sent_version(*d, "bob"))).collect()
        };
        let bob = w.client("bob").unwrap();
        for (d, sent) in expected {
            let got = bob.deliveries().find(|(_, x)| x.dossier_id == d).map(|(_, x)| x.key_version);
            prop_assert_eq!(got, sent, "dossier {}", d);
        }
        if let Some(s) = &w.service {
            prop_assert_eq!(s.lock().unwrap().pending_count(), 0);
        }
    }
}

#[test]
fn schedules_are_reproducible() {
    let steps = vec![
        Step::Act("alice", Action::Grant("bob".into(), Target::All)),
        Step::Net("bob", NetControl { drop_after_n_messages: Some(1), latency_ms: 9, ..Default::default() }),
        Step::Act("alice", Action::Send(Target::All)),
        Step::Act("bob", Action::Receive),
        Step::Net("alice", NetControl::down()),
        Step::Act("alice", Action::Update(Target::One(1))),
        Step::Act("alice", Action::Send(Target::One(1))),
    ];
    let run = || {
        let mut w = setup(BackendKind::Service, 11);
        play(&mut w, &steps);
        heal(&mut w);
        (w.clock.now_ms(), w.net.capture().len(), w.client("bob").unwrap().logical_view())
    };
    assert_eq!(run(), run());
}
