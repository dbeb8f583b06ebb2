#!/usr/bin/env python3
"""Writes the scripted conversations under fixtures/.

Each scenario gets <name>.jsonl (one model reply per call key) and
<name>.scenario.json (query and user steps). Run
`care_cli replay --bless fixtures/*.scenario.json` afterwards to stamp
request digests and expected events.
"""
import json
import pathlib
import sys

OUT = pathlib.Path(sys.argv[1] if len(sys.argv) > 1 else pathlib.Path(__file__).resolve().parent.parent / "fixtures")


class Script:
    def __init__(self, tag):
        self.tag = tag
        self.turns = {}
        self.records = []
        self.call_seq = 0

    def _key(self, role):
        n = self.turns.get(role, 0)
        self.turns[role] = n + 1
        return n

    def text(self, role, text):
        self.records.append({"session": self.tag, "role": role, "turn": self._key(role),
                             "request_digest": "", "response": {"text": text}})

    def tools(self, role, *calls):
        out = []
        for name, args in calls:
            self.call_seq += 1
            out.append({"id": f"call_{self.call_seq}", "name": name, "args": args})
        self.records.append({"session": self.tag, "role": role, "turn": self._key(role),
                             "request_digest": "", "response": {"tool_calls": out}})

    def write(self, steps, query, mode="care"):
        OUT.mkdir(parents=True, exist_ok=True)
        with open(OUT / f"{self.tag}.jsonl", "w") as f:
            for r in self.records:
                f.write(json.dumps(r) + "\n")
        scenario = {"name": self.tag, "session": self.tag, "query": query, "mode": mode, "steps": steps}
        with open(OUT / f"{self.tag}.scenario.json", "w") as f:
            json.dump(scenario, f, indent=2)
            f.write("\n")


QUERY = "Plan a 5-day trip to Hawaii"

EXPLICIT = [
    "The destination is Hawaii.",
    "The trip duration is 5 days.",
]

QUESTIONS = [
    ("Travel basics", [
        "Who will be traveling with you, and are there children in the group?",
        "What is your total budget for the trip?",
        "Which month or dates are you planning to travel?",
        "Which island or islands would you like to visit?",
        "What kind of accommodation do you prefer (resort, hotel, vacation rental)?",
    ]),
    ("Activities and preferences", [
        "Which activities interest you most (beaches, hiking, snorkeling, cultural sites)?",
        "Do you have any dietary restrictions or food preferences?",
        "Would you like to rent a car or rely on tours and shuttles?",
    ]),
]

ANSWERS = [
    ("Two adults, no kids. Our budget is about $6000 and we're going in early June.", [
        ("002", "The user travels with one other adult and no children.", True),
        ("003", "The user's total budget is about $6,000.", True),
        ("004", "The user plans to travel in early June.", True),
    ]),
    ("Maui and Oahu, please. A beachfront resort would be great.", [
        ("005", "The user wants to visit Maui and Oahu.", True),
        ("006", "The user prefers to stay at a beachfront resort.", True),
    ]),
    ("Snorkeling and hiking. No dietary restrictions. I'd rather not say about the car.", [
        ("007", "The user is most interested in snorkeling and hiking.", True),
        ("008", "The user has no dietary restrictions.", True),
        ("009", "The user does not want to discuss transportation on the islands.", False),
    ]),
]

BATCHES = [  # need ids per posted batch: group 1 of 5 -> 3 + 2, group 2 of 3
    ["002", "003", "004"],
    ["005", "006"],
    ["007", "008", "009"],
]

SIMPLE = {
    "002": "Who's coming along? Just adults, or kids too?",
    "003": "Roughly what's your total budget? For example $3,000, $6,000 or more?",
    "004": "When are you going? Summer, winter, or specific dates?",
    "005": "Which islands appeal to you? Oahu, Maui, Big Island or Kauai?",
    "006": "Where would you like to stay? Resort, hotel or vacation rental?",
    "007": "What do you enjoy most? Beaches, hiking, snorkeling or culture?",
    "008": "Any dietary restrictions or favorite foods?",
    "009": "Would you rent a car, or prefer tours and shuttles?",
}


def need_ids():
    n = len(EXPLICIT)
    ids = []
    for _, qs in QUESTIONS:
        group = []
        for _ in qs:
            group.append(f"{n:03d}")
            n += 1
        ids.append(group)
    return ids


def ask(batch, opener="Thanks! A few quick questions so I can tailor your trip:"):
    lines = [opener]
    for i, nid in enumerate(batch, 1):
        lines.append(f"{i}. {SIMPLE[nid]}")
    lines.append("[Inquiry]")
    return "\n".join(lines)


def ranking_json():
    ids = need_ids()
    out = {}
    for (topic, qs), group in zip(QUESTIONS, ids):
        out[topic] = {f"question-{i + 1}": {"need_id": nid, "need": q} for i, (nid, q) in enumerate(zip(group, qs))}
    return "Grouped by what shapes the plan first.\n```json\n" + json.dumps(out, indent=2) + "\n```"


def solution(cite, extra=""):
    lines = [
        "# 5-Day Hawaii Itinerary",
        "",
        f"A five-day plan for two adults (Need ID: 000, Need ID: 001, Need ID: 002).",
    ]
    if "003" in cite:
        lines.append("Budget target: about $6,000 in total (Need ID: 003).")
    lines += [
        "Travel window: early June (Need ID: 004).",
        "",
        "## Days 1-3: Maui (Need ID: 005)",
        "- Stay at a beachfront resort in Ka'anapali (Need ID: 006).",
        "- Morning snorkeling at Molokini Crater, afternoon hike in Iao Valley (Need ID: 007).",
        "- Open dining choices, no restrictions to plan around (Need ID: 008).",
        "",
        "## Days 4-5: Oahu (Need ID: 005)",
        "- Hike Diamond Head at sunrise and snorkel Hanauma Bay (Need ID: 007).",
    ]
    if extra:
        lines += ["", extra]
    return "\n".join(lines)


def discovery_and_ranking(s):
    s.tools("milestone", ("get_all_needs", {}))
    s.tools("milestone", ("load_solution", {}))
    s.text("milestone",
           "Next milestone: Collect detailed basic user needs required to complete the task.\n"
           "- Explanation: The memo is empty, so the team needs the travelers, budget, dates and interests first.\n"
           f"User query/feedback: {QUERY}\n[MilestoneEnd]")
    s.tools("needs_discovery", ("get_all_needs", {}))
    adds = [("add_need_slot", {"need": n, "Clarify": False, "user_want": True}) for n in EXPLICIT]
    for _, qs in QUESTIONS:
        adds += [("add_need_slot", {"need": q, "Clarify": True, "user_want": None}) for q in qs]
    s.tools("needs_discovery", *adds)
    s.text("needs_discovery", "I added the explicit needs and the questions that need clarification.\n[DISCOVEREND]")
    s.tools("ranking", ("get_clarify_needs", {}))
    s.text("ranking", ranking_json())


def opening(s):
    s.text("inquiry", f"The user's query is: {QUERY}\n[BeginMilestone]")
    discovery_and_ranking(s)
    s.text("inquiry", ask(BATCHES[0]))


def answer(s, index, next_text):
    _, fills = ANSWERS[index]
    s.tools("inquiry", *[("fill_need_slot", {"need_id": nid, "need": need, "user_want": want})
                         for nid, need, want in fills])
    s.text("inquiry", next_text)


def drafting(s, cite, note="User query/feedback: The user has answered the questions.", extra=""):
    s.text("milestone", f"{note}\n[BeginPlan]")
    s.tools("solution_craft", ("get_user_want_needs", {}))
    s.tools("solution_craft", ("write_solution", {"solution": solution(cite, extra)}))
    s.text("solution_craft", "The solution has been saved.\n[SolutionEnd]")
    s.text("inquiry", "Great news! Your Hawaii plan is ready. Please take a look at the Solution Panel.\n[Inquiry]")


ALL = ["000", "001", "002", "003", "004", "005", "006", "007", "008"]


def full_run(s):
    opening(s)
    answer(s, 0, ask(BATCHES[1], "Got it, thank you!"))
    answer(s, 1, ask(BATCHES[2], "Lovely choices. Last few questions:"))
    answer(s, 2, "Thanks! All questions have been answered; the memo is complete.\n[BeginMilestone]")
    drafting(s, ALL)


def steps_all():
    return [{"message": a} for a, _ in ANSWERS]


def hawaii():
    s = Script("hawaii")
    full_run(s)
    s.write(steps_all(), QUERY)


def hawaii_skip():
    s = Script("hawaii_skip")
    opening(s)
    s.text("inquiry", "The user wants to see the solution immediately and does not want to answer more "
                      "questions.\n[BeginMilestone]")
    s.text("milestone", "User query/feedback: The user wants the plan right away.\n[BeginPlan]")
    s.tools("solution_craft", ("get_user_want_needs", {}))
    s.tools("solution_craft", ("write_solution", {"solution":
            "# 5-Day Hawaii Itinerary\n\nA five-day Hawaii plan (Need ID: 000, Need ID: 001).\n"
            "- Day 1: arrive in Honolulu.\n- Days 2-4: Maui beaches.\n- Day 5: fly home."}))
    s.text("solution_craft", "Saved.\n[SolutionEnd]")
    s.text("inquiry", "Your plan is ready in the Solution Panel.\n[Inquiry]")
    s.write([{"message": "Actually, just show me the plan now."}], QUERY)


def hawaii_skip_explicit():
    s = Script("hawaii_skip_explicit")
    opening(s)
    s.text("milestone", "User query/feedback: The user wants the plan right away.\n[BeginPlan]")
    s.tools("solution_craft", ("write_solution", {"solution":
            "# 5-Day Hawaii Itinerary\n\nA five-day Hawaii plan (Need ID: 000, Need ID: 001)."}))
    s.text("solution_craft", "Saved.\n[SolutionEnd]")
    s.text("inquiry", "Your plan is ready in the Solution Panel.\n[Inquiry]")
    s.write([{"message": "", "intent": "skip"}], QUERY)


def hawaii_edit():
    s = Script("hawaii_edit")
    full_run(s)
    cite = [c for c in ALL if c != "003"]
    drafting(s, cite, "User has updated their requirements by themselves.\n"
                      "User query/feedback: The user removed the budget need.")
    s.write(steps_all() + [{"edit": {"kind": "delete", "need_id": "003"}}], QUERY)


def hawaii_edit_inquiring():
    s = Script("hawaii_edit_inquiring")
    opening(s)
    answer(s, 0, "Thanks, noted! I'll let the team know you updated your requirements.\n[BeginMilestone]")
    s.text("milestone", "User has updated their requirements by themselves.\n[BeginPlan]")
    s.tools("solution_craft", ("get_user_want_needs", {}))
    s.tools("solution_craft", ("write_solution", {"solution": solution(["000", "001", "002", "003", "004"])
                                                   .split("## Days 1-3")[0].rstrip() +
                                                   "\n- Stay on Maui (Need ID: 010)."}))
    s.text("solution_craft", "Saved.\n[SolutionEnd]")
    s.text("inquiry", "Your updated plan is ready in the Solution Panel.\n[Inquiry]")
    s.write([{"edit": {"kind": "add", "text": "I want to stay on Maui only."}}, {"message": ANSWERS[0][0]}], QUERY)


def hawaii_feedback():
    s = Script("hawaii_feedback")
    full_run(s)
    s.text("inquiry", "The user reviewed the plan and would like more beach time on Oahu.\n[BeginMilestone]")
    drafting(s, ALL, "User query/feedback: The user would like more beach time on Oahu.",
             extra="Extra: a free beach afternoon at Lanikai on day 5 (Need ID: 005).")
    s.write(steps_all() + [{"message": "Looks good, but could we get more beach time on Oahu?"}], QUERY)


def baseline():
    s = Script("baseline")
    s.text("baseline", "Here is a 5-day Hawaii itinerary:\n1. Day 1: Waikiki beach.\n2. Day 2: Pearl Harbor.\n"
                       "3. Day 3: fly to Maui.\n4. Day 4: Road to Hana.\n5. Day 5: Haleakala sunrise.")
    s.text("baseline", "Sure. For a lower budget, stay on Oahu and use TheBus instead of renting a car.")
    s.write([{"message": "Can you make it cheaper?"}], QUERY, mode="baseline")


if __name__ == "__main__":
    for build in (hawaii, hawaii_skip, hawaii_skip_explicit, hawaii_edit, hawaii_edit_inquiring, hawaii_feedback,
                  baseline):
        build()
    print(f"wrote fixtures to {OUT}")
