use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::Arc;
use std::time::{Duration, Instant};

use mrbsp_core::actor::{ActorError, ActorRef, ActorSystem, Context};
use mrbsp_core::transport::{start_network, TransportConfig};
use mrbsp_core::{NodeId, TransportKind};
use serde::{Deserialize, Serialize};

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
enum Msg {
    Ping,
    Pong(u32),
    Value(i64),
    Hit,
    Start { target: ActorRef, count: u32 },
    Note(String),
}

fn system(kind: TransportKind, nodes: usize) -> ActorSystem<Msg> {
    let net = start_network(kind, nodes, &TransportConfig::default().with_max_chunk_bytes(32)).unwrap();
    ActorSystem::start(&net, 3)
}

fn wait_until(cond: impl Fn() -> bool) {
    let deadline = Instant::now() + Duration::from_secs(10);
    while !cond() {
        assert!(Instant::now() < deadline, "condition not reached");
        std::thread::sleep(Duration::from_millis(5));
    }
}

#[test]
fn duplicate_path_is_rejected() {
    let sys = system(TransportKind::InProcess, 1);
    sys.spawn(NodeId(0), "dist-array", |_: &mut Context<'_, Msg>, _| {})
        .unwrap();
    let err = sys
        .spawn(NodeId(0), "dist-array", |_: &mut Context<'_, Msg>, _| {})
        .unwrap_err();
    assert_eq!(err, ActorError::Spawn(ActorRef::new(NodeId(0), "dist-array")));
}

#[test]
fn resolved_remote_reference_reaches_the_actor() {
    for kind in [TransportKind::InProcess, TransportKind::Tcp] {
        let sys = system(kind, 4);
        sys.spawn(NodeId(3), "dist-array", |ctx: &mut Context<'_, Msg>, m| {
            if m == Msg::Ping {
                ctx.reply(Msg::Pong(ctx.node().0));
            }
        })
        .unwrap();
        let r = sys.resolve("node3/dist-array").unwrap();
        let replies = sys.ask_each(&[r.clone()], Msg::Ping, Duration::from_secs(5)).unwrap();
        assert_eq!(replies, vec![(r, Msg::Pong(3))], "{kind}");
    }
}

#[test]
fn messages_from_one_sender_keep_order() {
    let sys = system(TransportKind::InProcess, 2);
    let seen = Arc::new(parking_lot::Mutex::new(Vec::new()));
    let s2 = Arc::clone(&seen);
    let me = sys
        .spawn(NodeId(1), "self-teller", move |ctx: &mut Context<'_, Msg>, m| match m {
            Msg::Ping => {
                let me = ctx.myself().clone();
                ctx.tell(&me, Msg::Note("X".into()));
                ctx.tell(&me, Msg::Note("Y".into()));
            }
            Msg::Note(s) => s2.lock().push(s),
            _ => {}
        })
        .unwrap();
    sys.tell(&me, Msg::Ping);
    wait_until(|| seen.lock().len() == 2);
    assert_eq!(*seen.lock(), vec!["X".to_string(), "Y".to_string()]);

    // Remote sender: 500 numbered messages arrive in order.
    let got = Arc::new(parking_lot::Mutex::new(Vec::new()));
    let g2 = Arc::clone(&got);
    let sink = sys
        .spawn(NodeId(0), "sink", move |_: &mut Context<'_, Msg>, m| {
            if let Msg::Value(v) = m {
                g2.lock().push(v)
            }
        })
        .unwrap();
    let sink2 = sink.clone();
    let src = sys
        .spawn(NodeId(1), "source", move |ctx: &mut Context<'_, Msg>, m| {
            if m == Msg::Ping {
                for i in 0..500 {
                    ctx.tell(&sink2, Msg::Value(i));
                }
            }
        })
        .unwrap();
    sys.tell(&src, Msg::Ping);
    wait_until(|| got.lock().len() == 500);
    assert_eq!(*got.lock(), (0..500).collect::<Vec<i64>>());
}

#[test]
fn handler_invocations_never_overlap() {
    let sys = system(TransportKind::InProcess, 2);
    let inside = Arc::new(AtomicBool::new(false));
    let overlaps = Arc::new(AtomicU64::new(0));
    let hits = Arc::new(AtomicU64::new(0));
    let (i2, o2, h2) = (Arc::clone(&inside), Arc::clone(&overlaps), Arc::clone(&hits));
    let mut local_count = 0u64;
    let target = sys
        .spawn(NodeId(0), "counter", move |_: &mut Context<'_, Msg>, m| {
            if i2.swap(true, Ordering::SeqCst) {
                o2.fetch_add(1, Ordering::SeqCst);
            }
            if m == Msg::Hit {
                local_count += 1;
                h2.store(local_count, Ordering::SeqCst);
            }
            i2.store(false, Ordering::SeqCst);
        })
        .unwrap();
    let mut senders = Vec::new();
    for s in 0..8 {
        let r = sys
            .spawn(NodeId(s % 2), &format!("sender-{s}"), |ctx: &mut Context<'_, Msg>, m| {
                if let Msg::Start { target, count } = m {
                    for _ in 0..count {
                        ctx.tell(&target, Msg::Hit);
                    }
                }
            })
            .unwrap();
        senders.push(r);
    }
    for s in &senders {
        sys.tell(s, Msg::Start { target: target.clone(), count: 1250 });
    }
    wait_until(|| hits.load(Ordering::SeqCst) == 10_000);
    assert_eq!(overlaps.load(Ordering::SeqCst), 0);
}

#[test]
fn ask_all_folds_replies() {
    for kind in [TransportKind::InProcess, TransportKind::Tcp] {
        let sys = system(kind, 3);
        let mut targets = Vec::new();
        for (n, v) in [(0u32, 7i64), (1, 42), (2, 3)] {
            targets.push(
                sys.spawn(NodeId(n), "slice", move |ctx: &mut Context<'_, Msg>, _| {
                    ctx.reply(Msg::Value(v));
                })
                .unwrap(),
            );
        }
        let max = |a: Msg, b: Msg| match (a, b) {
            (Msg::Value(x), Msg::Value(y)) => Msg::Value(x.max(y)),
            _ => unreachable!(),
        };
        let r = sys.ask_all(&targets, Msg::Ping, max, Duration::from_secs(5)).unwrap();
        assert_eq!(r, Msg::Value(42), "{kind}");
        let one = sys
            .ask_all(&targets[2..], Msg::Ping, max, Duration::from_secs(5))
            .unwrap();
        assert_eq!(one, Msg::Value(3));
    }
}

#[test]
fn ask_all_times_out_naming_the_silent_node() {
    let sys = system(TransportKind::InProcess, 3);
    let a = sys
        .spawn(NodeId(0), "w", |ctx: &mut Context<'_, Msg>, _| {
            ctx.reply(Msg::Value(1));
        })
        .unwrap();
    let b = sys.spawn(NodeId(2), "w", |_: &mut Context<'_, Msg>, _| {}).unwrap();
    let start = Instant::now();
    let err = sys
        .ask_all(&[a, b.clone()], Msg::Ping, |x, _| x, Duration::from_millis(300))
        .unwrap_err();
    assert!(start.elapsed() >= Duration::from_millis(300));
    assert_eq!(err, ActorError::AggregationTimeout { missing: vec![b] });
    assert_eq!(err.missing_nodes(), vec![NodeId(2)]);
}

#[test]
fn messages_to_missing_actors_are_dead_letters() {
    let sys = system(TransportKind::InProcess, 2);
    let ghost = sys.resolve("node1/nobody").unwrap();
    sys.tell(&ghost, Msg::Ping);
    wait_until(|| sys.dead_letters() == 1);
    assert!(sys.resolve("node9/x").is_err());
}

#[test]
fn late_reply_after_completion_is_a_dead_letter() {
    let sys = system(TransportKind::InProcess, 1);
    let w = sys
        .spawn(NodeId(0), "double", |ctx: &mut Context<'_, Msg>, _| {
            ctx.reply(Msg::Value(1));
            ctx.reply(Msg::Value(2));
        })
        .unwrap();
    let r = sys.ask_all(&[w], Msg::Ping, |a, _| a, Duration::from_secs(5)).unwrap();
    assert_eq!(r, Msg::Value(1));
    wait_until(|| sys.dead_letters() >= 1);
}
