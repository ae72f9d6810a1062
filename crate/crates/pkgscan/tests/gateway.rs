use std::sync::Arc;
use std::time::Duration;

use pkgscan::gateway::{Clock, Failure, Gateway, ManualClock, MockProvider, MockScript, BACKOFF_BASE};
use pkgscan_core::chat::{prompt_hash, ChatError, ChatMessage, ChatModel, Role};
use pkgscan_core::prompts::{file_analysis_prompt, parse_verdict, Classification};
use sha2::{Digest, Sha256};

/// Clock shared between the gateway and the test.
struct Shared(Arc<ManualClock>);

impl Clock for Shared {
    fn now(&self) -> Duration {
        self.0.now()
    }
    fn sleep(&self, d: Duration) {
        self.0.sleep(d)
    }
}

#[test]
fn prompt_hash_is_sha256_of_framed_messages() {
    let messages = [ChatMessage::developer("a"), ChatMessage::user("b\nc")];
    let want = hex::encode(Sha256::digest(b"developer\x1fa\x1euser\x1fb\nc\x1e"));
    assert_eq!(prompt_hash(&messages), want);
    assert_eq!(messages[0].role, Role::Developer);
    let swapped = [ChatMessage::user("a"), ChatMessage::developer("b\nc")];
    assert_ne!(prompt_hash(&swapped), want);
}

#[test]
fn hash_keyed_reply_reaches_the_parser() {
    let messages = file_analysis_prompt("setup.py", "import os\nos.system('id')\n");
    let mut script = MockScript::with_default("- **Predicted Classification**: Benign\n- **Malicious Score**: 0");
    script.by_hash.insert(prompt_hash(&messages), "Malicious, 90".into());
    let g = Gateway::new(MockProvider::new(script), 0, 1, 0);
    let v = parse_verdict(&g.chat(&messages).unwrap()).unwrap();
    assert_eq!((v.classification, v.score), (Classification::Malicious, 90));
    let other = file_analysis_prompt("setup.py", "print(1)\n");
    let v = parse_verdict(&g.chat(&other).unwrap()).unwrap();
    assert_eq!((v.classification, v.score), (Classification::Benign, 0));
}

#[test]
fn in_flight_requests_are_bounded() {
    let script = MockScript { latency_ms: 15, ..MockScript::with_default("ok") };
    let g = Gateway::new(MockProvider::new(script), 0, 3, 0);
    std::thread::scope(|s| {
        for i in 0..12 {
            let g = &g;
            s.spawn(move || g.chat(&[ChatMessage::user(format!("req {i}"))]).unwrap());
        }
    });
    assert_eq!(g.transport().calls(), 12);
    assert!(g.transport().max_in_flight() <= 3);
    assert_eq!(g.log().len(), 12);
}

#[test]
fn retry_schedule_is_seeded_and_capped() {
    let sleeps = |seed: u64| {
        let clock = Arc::new(ManualClock::default());
        let script = MockScript { always_fail: Some(Failure::RateLimited), ..Default::default() };
        let g = Gateway::with_clock(MockProvider::new(script), 4, 1, seed, Box::new(Shared(clock.clone())));
        assert_eq!(g.chat(&[ChatMessage::user("x")]), Err(ChatError::RateLimited));
        assert_eq!(g.transport().calls(), 5);
        clock.sleeps()
    };
    let a = sleeps(11);
    assert_eq!(a.len(), 4);
    for (retry, d) in a.iter().enumerate() {
        assert!(*d <= BACKOFF_BASE * 2u32.pow(retry as u32), "retry {retry}: {d:?}");
    }
    assert_eq!(a, sleeps(11));
    assert_ne!(a, sleeps(12));
}
