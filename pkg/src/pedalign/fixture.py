"""Deterministic generator for the bundled demo corpus.

The generator plays out scripted biology tutoring sessions: each question is
broken into subproblems, a simulated student answers with a random response
type, and the tutor picks the matching evaluation, action and subproblem
state. Direct-solution actions (2, 5) only follow two guidance attempts, so
every conversation satisfies the action-ordering rule.
"""

from __future__ import annotations

import random
from importlib import resources
from pathlib import Path

from .schema import Conversation, ConversationTurn, TutorAnnotation

# (question, [(subproblem, answer, hint)])
TOPICS = [
    ("How do plant cells make their own food?", [
        ("Which organelle captures light energy?", "chloroplast", "it is green and full of chlorophyll"),
        ("What gas do plants take in for photosynthesis?", "carbon dioxide", "animals breathe it out"),
        ("What sugar is produced?", "glucose", "it is a six-carbon sugar"),
    ]),
    ("Why do muscle cells need many mitochondria?", [
        ("What molecule do mitochondria produce?", "atp", "it is the energy currency of the cell"),
        ("Which process in mitochondria uses oxygen?", "cellular respiration", "it is the reverse of photosynthesis"),
    ]),
    ("How is genetic information copied before cell division?", [
        ("What molecule stores genetic information?", "dna", "it is a double helix"),
        ("Which enzyme builds the new strand?", "dna polymerase", "its name ends in -ase and it polymerizes"),
        ("Is replication conservative or semiconservative?", "semiconservative", "each copy keeps one old strand"),
    ]),
    ("How does a protein get made from a gene?", [
        ("What is the first step called?", "transcription", "it writes dna into rna"),
        ("Where are proteins assembled?", "ribosome", "it reads codons"),
        ("What is the second step called?", "translation", "it converts the rna language into amino acids"),
    ]),
    ("Why do red blood cells carry so much oxygen?", [
        ("Which protein binds oxygen?", "hemoglobin", "it contains iron"),
        ("Which metal sits at the center of heme?", "iron", "it is also why blood is red"),
    ]),
    ("How do enzymes speed up reactions?", [
        ("What energy barrier do enzymes lower?", "activation energy", "it is the energy needed to start a reaction"),
        ("Where does the substrate bind?", "active site", "it is a pocket on the enzyme"),
    ]),
    ("How does water move into a root cell?", [
        ("What is the movement of water across a membrane called?", "osmosis", "it goes toward higher solute concentration"),
        ("Is this transport active or passive?", "passive", "it needs no atp"),
    ]),
    ("How are traits passed from parents to offspring?", [
        ("What are alternative forms of a gene called?", "alleles", "you get one from each parent"),
        ("Which type of cell division makes gametes?", "meiosis", "it halves the chromosome number"),
        ("What do we call an allele that masks another?", "dominant", "its opposite is recessive"),
    ]),
    ("Why does the cell membrane control what enters the cell?", [
        ("What molecules form the membrane bilayer?", "phospholipids", "they have a polar head and two tails"),
        ("What property lets the membrane allow only some molecules through?", "selective permeability", "it is selectively open"),
    ]),
    ("How do neurons send signals?", [
        ("What is the electrical signal called?", "action potential", "it travels down the axon"),
        ("Which ion rushes in first?", "sodium", "its symbol is na"),
        ("What chemicals cross the synapse?", "neurotransmitters", "they are released from vesicles"),
    ]),
    ("How does the body fight a bacterial infection?", [
        ("Which cells produce antibodies?", "b cells", "they mature in bone marrow"),
        ("Which cells engulf bacteria?", "macrophages", "their name means big eaters"),
    ]),
    ("Where does the energy in an ecosystem come from?", [
        ("What is the original energy source?", "the sun", "it shines on producers"),
        ("What are organisms that make their own food called?", "producers", "they are also called autotrophs"),
        ("About what fraction of energy passes to the next level?", "ten percent", "most is lost as heat"),
    ]),
    ("How do new species form?", [
        ("What is the formation of new species called?", "speciation", "it splits one lineage into two"),
        ("What kind of isolation often starts it?", "geographic isolation", "a mountain or river can cause it"),
    ]),
    ("Why do cells divide by mitosis?", [
        ("How many daughter cells does mitosis make?", "two", "it is one division"),
        ("Are the daughter cells identical?", "identical", "they have the same chromosomes as the parent"),
    ]),
    ("How does the heart pump blood through the body?", [
        ("Which chamber pumps blood to the body?", "left ventricle", "it has the thickest wall"),
        ("Which vessels carry blood away from the heart?", "arteries", "they begin with the letter a"),
        ("What prevents backflow of blood?", "valves", "they snap shut between chambers"),
    ]),
    ("How do kidneys clean the blood?", [
        ("What is the functional unit of the kidney?", "nephron", "there are about a million per kidney"),
        ("What waste made from proteins is removed?", "urea", "it contains nitrogen"),
    ]),
    ("How does natural selection change a population?", [
        ("What must exist among individuals for selection to act?", "variation", "individuals differ from one another"),
        ("What is reproductive success called?", "fitness", "it is about leaving offspring"),
    ]),
    ("How does carbon cycle through the environment?", [
        ("Which process returns carbon dioxide to the air from organisms?", "respiration", "every living cell does it"),
        ("Which process removes carbon dioxide from the air?", "photosynthesis", "plants do it in light"),
    ]),
    ("Why do we need a digestive system?", [
        ("Which enzyme starts digesting starch in the mouth?", "amylase", "it is found in saliva"),
        ("Where are most nutrients absorbed?", "small intestine", "it is lined with villi"),
        ("What do proteins break down into?", "amino acids", "they are the building blocks of proteins"),
    ]),
    ("How do vaccines protect us?", [
        ("What part of a pathogen does a vaccine present?", "antigen", "the immune system recognizes it"),
        ("What cells remember the pathogen?", "memory cells", "they persist for years"),
    ]),
]

CORRECT = ("Is it {answer}?", "I think the answer is {answer}.", "{answer}")
INCORRECT = ("I think it is {wrong}.", "Maybe {wrong}?", "Is it {wrong}?")
NO_IDEA = ("I don't know.", "I have no idea.")
PARTIAL = ("Part of it is {partial}, but I'm not sure about the rest.", "Something with {partial}?")
AMBIGUOUS = ("Hmm, maybe?", "Not sure.", "Something like that.")
OFF_TOPIC = ("Can we talk about football instead?", "What's for lunch today?")
INQUIRY = ("Can you explain that again?", "What does that mean?")

HINT_ACTION = (
    "Not quite. Here is a hint: {hint}. Can you try again?",
    "That is not correct. Think about this: {hint}. What do you think now?",
)
PARTIAL_ACTION = (
    "You are partly right. Here is a hint: {hint}. What else?",
    "Good start, but something is missing. Remember: {hint}. Can you complete it?",
)
SOLVE_ACTION = "That's okay. The solution is {answer}. Next, {next}"
SOLVE_PARTIAL_ACTION = "Good effort. The full solution is {answer}. Next, {next}"
PRAISE = "Correct! Great job, {answer} is right. Next, {next}"
CLARIFY = "Could you explain your thinking a bit more? {sub}"
REDIRECT = "Let's stay focused on the problem. {sub}"
EXPLAIN = "Good question. Remember that {hint}. So, {sub}"
INTRO = "Let's break the problem into subproblems and tackle them one by one. First, {sub}"
FINISH = "Correct! Well done, you have solved every subproblem."

RESPONSE_TYPES = ("b", "a", "c", "d", "e", "f")
RESPONSE_WEIGHTS = (0.35, 0.27, 0.15, 0.09, 0.06, 0.08)
MAX_TURNS = 14


def _lower_first(text: str) -> str:
    return text[:1].lower() + text[1:]


def _simulate(conv_id: str, topic: tuple, all_answers: list[str], rng: random.Random) -> Conversation:
    question, subs = topic
    turns = [ConversationTurn(1, f"Q. {question}", TutorAnnotation(
        "g", 9, "w", subs[0][0], INTRO.format(sub=_lower_first(subs[0][0]))))]
    k, wrong_tries, partial_tries = 0, 0, 0
    while k < len(subs) and len(turns) < MAX_TURNS:
        sub, answer, hint = subs[k]
        nxt = _lower_first(subs[k + 1][0]) if k + 1 < len(subs) else "let's put it all together."
        kind = rng.choices(RESPONSE_TYPES, RESPONSE_WEIGHTS)[0]
        if kind == "b":
            student = rng.choice(CORRECT).format(answer=answer)
            if k + 1 == len(subs):
                ann = TutorAnnotation("b", 10, "z", sub, FINISH)
            else:
                ann = TutorAnnotation("b", 3, "y", sub, PRAISE.format(answer=answer, next=nxt))
            k, wrong_tries, partial_tries = k + 1, 0, 0
        elif kind == "a":
            if rng.random() < 0.3:
                student = rng.choice(NO_IDEA)
            else:
                # same-topic distractors keep the student turns close to the material
                wrong = rng.choice([a for _, a, _ in subs if a != answer] or all_answers)
                student = rng.choice(INCORRECT).format(wrong=wrong)
            if wrong_tries < 2:
                ann = TutorAnnotation("a", 1, "x", sub, rng.choice(HINT_ACTION).format(hint=hint))
                wrong_tries += 1
            else:
                ann = TutorAnnotation("a", 2, "y", sub, SOLVE_ACTION.format(answer=answer, next=nxt))
                k, wrong_tries, partial_tries = k + 1, 0, 0
        elif kind == "c":
            partial = answer.split()[0] if " " in answer else answer[: max(2, len(answer) // 2)]
            student = rng.choice(PARTIAL).format(partial=partial)
            if partial_tries < 2:
                ann = TutorAnnotation("c", 4, "x", sub, rng.choice(PARTIAL_ACTION).format(hint=hint))
                partial_tries += 1
            else:
                ann = TutorAnnotation("c", 5, "y", sub, SOLVE_PARTIAL_ACTION.format(answer=answer, next=nxt))
                k, wrong_tries, partial_tries = k + 1, 0, 0
        elif kind == "d":
            student = rng.choice(AMBIGUOUS)
            ann = TutorAnnotation("d", 6, "x", sub, CLARIFY.format(sub=sub))
        elif kind == "e":
            student = rng.choice(OFF_TOPIC)
            ann = TutorAnnotation("e", 7, "x", sub, REDIRECT.format(sub=sub))
        else:
            student = rng.choice(INQUIRY)
            ann = TutorAnnotation("f", 8, "x", sub, EXPLAIN.format(hint=hint, sub=_lower_first(sub)))
        turns.append(ConversationTurn(len(turns) + 1, student, ann))
    return Conversation(conv_id, question, tuple(turns))


def generate_fixture(n_conversations: int = 40, seed: int = 7) -> tuple[list[Conversation], dict[str, str]]:
    """Simulated corpus plus the subproblem -> answer bank."""
    rng = random.Random(seed)
    all_answers = sorted({a for _, subs in TOPICS for _, a, _ in subs})
    convs = [
        _simulate(f"conv-{i:03d}", TOPICS[i % len(TOPICS)], all_answers, rng)
        for i in range(n_conversations)
    ]
    bank = {sub: answer for _, subs in TOPICS for sub, answer, _ in subs}
    return convs, bank


FIXTURE_FILES = {
    "corpus": "fixture_conversations.jsonl",
    "sft_stream": "fixture_sft_stream.jsonl",
    "solutions": "fixture_solutions.json",
    "config": "fixture_config.json",
}


def fixture_path(name: str) -> Path:
    return Path(str(resources.files("pedalign") / "data" / FIXTURE_FILES[name]))
