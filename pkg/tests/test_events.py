import threading

import pytest

from agynlite.clock import ManualClock
from agynlite.events import EventBus
from agynlite.store import Store


@pytest.fixture
def store():
    return Store()


@pytest.fixture
def bus(store):
    return EventBus(store, ManualClock())


def test_first_event_id(bus):
    sub = bus.subscribe("thread.message", "g")
    assert bus.publish("thread.message", {"thread": "t1", "msg": "m1"}) == "ev-000001"
    ev = sub.get(timeout=1)
    assert ev.payload == {"thread": "t1", "msg": "m1"}


def test_publish_order_preserved(bus):
    sub = bus.subscribe("thread.message", "g")
    bus.publish("thread.message", {"n": 1})
    bus.publish("thread.message", {"n": 2})
    first = sub.get(timeout=1)
    sub.ack(first.id)
    second = sub.get(timeout=1)
    assert (first.payload["n"], second.payload["n"]) == (1, 2)


def test_empty_topic_rejected(bus):
    with pytest.raises(ValueError):
        bus.publish("", {})


def test_ack_ends_redelivery(bus):
    sub = bus.subscribe("instance.state", "g")
    bus.publish("instance.state", {"n": 1})
    ev = sub.get(timeout=1)
    sub.ack(ev.id)
    bus._clock.advance(60_000)
    assert sub.get(timeout=0.2) is None


def test_unacked_event_redelivered_after_timeout(bus):
    sub = bus.subscribe("instance.state", "g")
    bus.publish("instance.state", {"n": 1})
    ev = sub.get(timeout=1)
    assert sub.get(timeout=0.2) is None  # not yet due
    bus._clock.advance(6_000)
    again = sub.get(timeout=1)
    assert again.id == ev.id


def test_subscriber_before_publish_sees_nothing(bus):
    sub = bus.subscribe("config.applied", "g")
    assert sub.get(timeout=0.2) is None
    bus.publish("config.applied", {"n": 1})
    assert sub.get(timeout=1) is not None


def test_crash_and_resubscribe_redelivers(store):
    bus = EventBus(store, ManualClock())
    bus.subscribe("thread.message", "g")
    bus.publish("thread.message", {"n": 1})
    # consumer crashes without acking; a new bus over the same store
    # (process restart) must redeliver to the same group
    bus2 = EventBus(store, ManualClock())
    sub2 = bus2.subscribe("thread.message", "g")
    ev = sub2.get(timeout=1)
    assert ev is not None and ev.payload == {"n": 1}
    sub2.ack(ev.id)
    bus3 = EventBus(store, ManualClock())
    sub3 = bus3.subscribe("thread.message", "g")
    assert sub3.get(timeout=0.2) is None


def test_new_group_starts_at_head(store):
    bus = EventBus(store, ManualClock())
    bus.publish("thread.message", {"n": 1})
    sub = bus.subscribe("thread.message", "latecomer")
    assert sub.get(timeout=0.2) is None


def test_group_consumes_each_event_at_least_once():
    store = Store()
    bus = EventBus(store, ManualClock())
    sub_a = bus.subscribe("thread.message", "g")
    sub_b = bus.subscribe("thread.message", "g")
    total = 1000
    seen = []
    seen_lock = threading.Lock()

    def consume(sub):
        while True:
            ev = sub.get(timeout=0.5)
            if ev is None:
                return
            with seen_lock:
                seen.append(ev.id)
            sub.ack(ev.id)

    for i in range(total):
        bus.publish("thread.message", {"n": i})
    workers = [
        threading.Thread(target=consume, args=(s,)) for s in (sub_a, sub_b)
    ]
    for w in workers:
        w.start()
    for w in workers:
        w.join()
    assert set(seen) == {f"ev-{i:06d}" for i in range(1, total + 1)}


def test_no_invented_events(bus):
    sub = bus.subscribe("thread.message", "g")
    published = {bus.publish("thread.message", {"n": i}) for i in range(20)}
    delivered = set()
    while True:
        ev = sub.get(timeout=0.2)
        if ev is None:
            break
        delivered.add(ev.id)
        sub.ack(ev.id)
    assert delivered <= published
